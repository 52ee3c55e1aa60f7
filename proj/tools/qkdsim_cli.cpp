// qkdsim command-line front end.
//
// Exit codes: 0 success, 1 usage or configuration error, 2 infeasible
// decoy bounds (result still written), 3 I/O error.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <fmt/format.h>
#include <nlohmann/json.hpp>

#include "qkdsim/keyrate.hpp"
#include "qkdsim/scenario.hpp"

namespace fs = std::filesystem;
using namespace qkdsim;

namespace {

enum Exit { kOk = 0, kUsage = 1, kInfeasible = 2, kIo = 3 };

Scenario load_scenario(const fs::path& path) {
    Scenario s;
    read_json_file(path).get_to(s);
    return s;
}

std::vector<double> parse_losses(const std::string& text) {
    std::vector<double> out;
    std::stringstream ss(text);
    std::string item;
    while (std::getline(ss, item, ',')) {
        if (item.empty()) continue;
        std::size_t used = 0;
        const double v = std::stod(item, &used);
        if (used != item.size()) throw std::invalid_argument("bad loss value \"" + item + "\"");
        out.push_back(v);
    }
    if (out.empty()) throw std::invalid_argument("--losses needs at least one value");
    return out;
}

/// Pulse and detection records of Mode `mode` for a short per-pulse run.
void dump_events(const Scenario& s, const fs::path& path) {
    RandomStream rng(s.seed, "event-dump");
    RandomStream drift_rng(s.seed, s.channel.drift.seed_stream);
    const DriftTrajectory traj(s.channel, s.duration, s.drift_substep, drift_rng);
    McOptions opts;
    opts.keep_records = true;
    opts.trajectory = &traj;
    opts.max_pulses = s.max_pulses;
    opts.drift_substep = s.drift_substep;
    const auto pulses = static_cast<std::uint64_t>(std::llround(s.protocol.qubit_rate * s.duration));
    const McResult r = run_mc(s.link_setup(), traj.state_at(0.0), pulses, rng, opts);

    std::ofstream out(path);
    if (!out) throw IoError("cannot open " + path.string() + " for writing");
    out << "pulse_index,port,basis,outcome,timestamp_ps\n";
    for (const auto& m : r.modes)
        for (const auto& d : m.detections) {
            out << d.pulse_index << ',' << int(d.receive_port) << ','
                << (d.basis == Basis::Z ? 'Z' : 'X') << ',' << int(d.outcome) << ','
                << std::llround(d.timestamp * 1e12) << '\n';
        }
    if (!out.flush()) throw IoError("write failed for " + path.string());
}

int cmd_simulate(const fs::path& scenario_path, const fs::path& out_dir,
                 const std::optional<fs::path>& events) {
    const Scenario s = load_scenario(scenario_path);
    const WindowedResult r = run_scenario(s);
    emit_outputs(r, out_dir);
    if (events) dump_events(s, *events);
    const auto& sum = r.summary;
    std::cout << fmt::format("{} windows, {} acquisition, {} engine\n", sum.window_count,
                             sum.acquisition, sum.engine);
    for (const auto& m : sum.modes) {
        std::cout << fmt::format(
            "mode {}: SKR {:.4g} +/- {:.3g} bps (raw {:.4g} +/- {:.3g}), Q_Z {:.4f}, "
            "{} negative windows\n",
            m.mode, m.mean_skr, m.std_skr, m.mean_skr_raw, m.std_skr_raw, m.qber_z,
            m.negative_windows);
    }
    std::cout << fmt::format("total: {:.4g} bps\n", sum.mean_total_skr);
    return kOk;
}

int cmd_keyrate(const fs::path& tallies_path, const KeyRateOptions& opts) {
    const nlohmann::json j = read_json_file(tallies_path);
    std::vector<TallyBlock> blocks;
    if (j.is_array()) {
        for (const auto& item : j) blocks.push_back(item.get<TallyBlock>());
    } else {
        blocks.push_back(j.get<TallyBlock>());
    }
    if (blocks.empty()) throw std::invalid_argument("no tally blocks in " + tallies_path.string());

    // Blocks without X data borrow the first block that has some.
    const TallyBlock* reference = nullptr;
    for (const auto& b : blocks)
        if (b.has_basis(Basis::X)) {
            reference = &b;
            break;
        }
    nlohmann::json out = nlohmann::json::array();
    bool infeasible = false;
    for (const auto& b : blocks) {
        const auto r = secret_key_length(b, opts, reference == &b ? nullptr : reference);
        infeasible = infeasible || r.d1_infeasible;
        out.push_back(r);
    }
    std::cout << (j.is_array() ? out : out[0]).dump(2) << '\n';
    return infeasible ? kInfeasible : kOk;
}

int cmd_sweep(const fs::path& scenario_path, const std::string& losses, const fs::path& out_dir) {
    const Scenario s = load_scenario(scenario_path);
    const auto rows = loss_sweep(s, parse_losses(losses));
    std::error_code ec;
    fs::create_directories(out_dir, ec);
    if (ec) throw IoError("cannot create directory " + out_dir.string() + ": " + ec.message());
    write_sweep_csv(rows, out_dir / "sweep.csv");
    for (const auto& r : rows)
        std::cout << fmt::format("{:6.2f} dB  mode1 {:.4g}  mode2 {:.4g}  total {:.4g} bps\n",
                                 r.loss_db, r.skr[0], r.skr[1], r.total);
    return kOk;
}

int cmd_calibrate(const fs::path& targets_path, const fs::path& template_path,
                  const fs::path& out_path) {
    const auto targets = read_json_file(targets_path).get<CalibrationTargets>();
    const Scenario tmpl = load_scenario(template_path);
    try {
        const auto report = calibrate(targets, tmpl);
        write_json_file(nlohmann::json(report.scenario), out_path);
        std::cout << nlohmann::json(report).dump(2) << '\n';
        return kOk;
    } catch (const CalibrationError& e) {
        std::cerr << "error: " << e.what() << '\n';
        std::cerr << nlohmann::json(e.report()).dump(2) << '\n';
        return kUsage;
    }
}

int cmd_optimize(const fs::path& channel_path, const fs::path& out_path, std::uint64_t seed,
                 const std::optional<fs::path>& space_path) {
    const nlohmann::json j = read_json_file(channel_path);
    // Either a bare ChannelSummary or {"channel": ..., "base": ProtocolConfig, "space": ...}.
    ChannelSummary summary;
    ProtocolConfig base = active_decoy_config();
    SearchSpace space;
    if (j.contains("channel")) {
        j.at("channel").get_to(summary);
        if (j.contains("base")) j.at("base").get_to(base);
        if (j.contains("space")) j.at("space").get_to(space);
    } else {
        j.get_to(summary);
    }
    if (space_path) read_json_file(*space_path).get_to(space);
    validate_config(base);

    OptimizeOptions opts;
    opts.seed = seed;
    const auto r = optimize_parameters(summary, base, space, opts);
    nlohmann::json out{{"config", r.config},
                       {"skr_bps", r.skr},
                       {"evaluations", r.evaluations},
                       {"iterations", r.iterations},
                       {"converged", r.converged},
                       {"message", r.message}};
    write_json_file(out, out_path);
    std::cout << out.dump(2) << '\n';
    if (!r.converged) std::cerr << "warning: " << r.message << '\n';
    return kOk;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Decoy-state time-bin QKD over LP-mode multiplexed few-mode fiber"};
    app.require_subcommand(1);

    fs::path scenario, out, tallies, targets, channel;
    std::optional<fs::path> events, space;
    std::string losses;
    std::uint64_t seed = 1;
    KeyRateOptions kopts;
    bool asymptotic = false;

    auto* sim = app.add_subcommand("simulate", "run a scenario and write windows.csv / summary.json");
    sim->add_option("--scenario", scenario, "scenario JSON")->required()->check(CLI::ExistingFile);
    sim->add_option("--out", out, "output directory")->required();
    sim->add_option("--events", events, "also write a per-pulse detection CSV");

    auto* kr = app.add_subcommand("keyrate", "key length of a TallyBlock JSON (or array of them)");
    kr->add_option("--tallies", tallies, "TallyBlock JSON")->required()->check(CLI::ExistingFile);
    kr->add_option("--eps-divisor", kopts.eps_divisor, "eps_sec share per inequality");
    kr->add_flag("--asymptotic", asymptotic, "drop statistical fluctuation terms");
    kr->add_flag("!--no-shared-phase", kopts.shared_phase_error,
                 "do not borrow X statistics across blocks");

    auto* sw = app.add_subcommand("sweep-loss", "SKR versus fiber loss");
    sw->add_option("--scenario", scenario, "scenario JSON")->required()->check(CLI::ExistingFile);
    sw->add_option("--losses", losses, "comma-separated losses in dB")->required();
    sw->add_option("--out", out, "output directory")->required();

    auto* cal = app.add_subcommand("calibrate", "fit a scenario template to measured targets");
    cal->add_option("--targets", targets, "targets JSON")->required()->check(CLI::ExistingFile);
    cal->add_option("--scenario", scenario, "template scenario JSON")
        ->required()
        ->check(CLI::ExistingFile);
    cal->add_option("--out", out, "calibrated scenario JSON")->required();

    auto* opt = app.add_subcommand("optimize", "optimize protocol parameters for a channel");
    opt->add_option("--channel", channel, "channel summary JSON")
        ->required()
        ->check(CLI::ExistingFile);
    opt->add_option("--out", out, "output JSON")->required();
    opt->add_option("--space", space, "search space JSON");
    opt->add_option("--seed", seed, "seed for random restarts");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? kOk : kUsage;
    }
    kopts.finite_size = !asymptotic;

    try {
        if (*sim) return cmd_simulate(scenario, out, events);
        if (*kr) return cmd_keyrate(tallies, kopts);
        if (*sw) return cmd_sweep(scenario, losses, out);
        if (*cal) return cmd_calibrate(targets, scenario, out);
        if (*opt) return cmd_optimize(channel, out, seed, space);
    } catch (const IoError& e) {
        std::cerr << "I/O error: " << e.what() << '\n';
        return kIo;
    } catch (const ConfigError& e) {
        std::cerr << "configuration error: " << e.what() << '\n';
        for (const auto& v : e.violations()) std::cerr << "  " << v.field << ": " << v.message << '\n';
        return kUsage;
    } catch (const ResourceLimitError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kUsage;
    } catch (const nlohmann::json::exception& e) {
        std::cerr << "configuration error: " << e.what() << '\n';
        return kUsage;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kUsage;
    }
    return kUsage;
}
