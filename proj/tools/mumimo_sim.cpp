// Command-line front end: dataset generation, training and BER evaluation.

#include "mumimo/harness.hpp"

#include "CLI11.hpp"

#include <filesystem>
#include <fstream>
#include <iostream>

using nlohmann::json;
using namespace mumimo;

namespace {

struct Overrides {
    std::string config;
    std::string snr;
    std::string scheme;
    std::string direction;
    std::string pilot;
    std::string speed;
    std::string code;
    std::uint64_t seed = 0;
    int n_rgs = 0;
    int epochs = 0;
    int max_steps = 0;
};

void add_common(CLI::App* cmd, Overrides& o) {
    cmd->add_option("--config", o.config, "JSON config file (defaults apply to missing keys)");
    cmd->add_option("--seed", o.seed, "Base seed");
    cmd->add_option("--snr", o.snr, "SNR points in dB: start:stop:step or a comma list");
    cmd->add_option("--scheme", o.scheme, "baseline | perfect_csi | ml_chest | ml_receiver");
    cmd->add_option("--direction", o.direction, "uplink | downlink");
    cmd->add_option("--pilot", o.pilot, "1P | 2P");
    cmd->add_option("--speed", o.speed, "Speed range in km/h, low:high");
    cmd->add_option("--n-rgs", o.n_rgs, "Resource grids per SNR point (training: total grids)");
    cmd->add_option("--code", o.code, "uncoded | ieee80211n_1296_r12 | path to an alist file");
}

bool given(const CLI::App* cmd, const std::string& name) {
    const CLI::Option* opt = cmd->get_option_no_throw(name);
    return opt != nullptr && opt->count() > 0;
}

// Reads the config file and applies flag overrides at the JSON level so
// that every value passes the same validation.
SimConfig resolve(const Overrides& o, const CLI::App* cmd) {
    json j = json::object();
    if (!o.config.empty()) {
        std::ifstream in(o.config);
        if (!in) throw std::runtime_error("cannot open config file '" + o.config + "'");
        try {
            j = json::parse(in);
        } catch (const json::parse_error& e) {
            throw ConfigError("<root>", std::string("invalid JSON in '") + o.config + "': " + e.what());
        }
        if (!j.is_object()) throw ConfigError("<root>", "expected an object");
    }
    if (given(cmd, "--seed")) j["seed"] = o.seed;
    if (given(cmd, "--snr")) {
        try {
            j["snr_db"] = parse_snr_spec(o.snr);
        } catch (const std::invalid_argument& e) {
            throw ConfigError("snr_db", e.what());
        }
    }
    if (given(cmd, "--scheme")) j["scheme"] = o.scheme;
    if (given(cmd, "--direction")) j["direction"] = o.direction;
    if (given(cmd, "--pilot")) {
        if (!j.contains("grid")) j["grid"] = json::object();
        j["grid"]["pilot_kind"] = o.pilot;
    }
    if (given(cmd, "--speed")) {
        const auto colon = o.speed.find(':');
        try {
            if (colon == std::string::npos) throw std::invalid_argument("missing ':'");
            j["speed_kmh"] = {std::stod(o.speed.substr(0, colon)), std::stod(o.speed.substr(colon + 1))};
        } catch (const std::exception&) {
            throw ConfigError("speed_kmh", "expected low:high, got '" + o.speed + "'");
        }
    }
    if (given(cmd, "--n-rgs")) {
        if (cmd->get_name() == "train" || cmd->get_name() == "gen-data") {
            if (!j.contains("training")) j["training"] = json::object();
            j["training"]["n_rgs"] = o.n_rgs;
        } else {
            j["n_rgs"] = o.n_rgs;
        }
    }
    if (given(cmd, "--code")) j["code"] = o.code;
    if (given(cmd, "--epochs") || given(cmd, "--max-steps")) {
        if (!j.contains("training")) j["training"] = json::object();
        if (given(cmd, "--epochs")) j["training"]["epochs"] = o.epochs;
        if (given(cmd, "--max-steps")) j["training"]["max_steps"] = o.max_steps;
    }
    return sim_config_from_json(j);
}

void print_train_summary(const TrainOutcome& t) {
    std::cout << "steps=" << t.result.steps;
    if (!t.result.log.empty()) std::cout << " final_loss=" << t.result.log.back().loss;
    std::cout << " gamma=" << t.params.gamma() << " theta=" << t.params.theta() << '\n';
}

const char* kCsvFooter =
    "CSV columns (fixed order): scheme,direction,pilot,speed_lo_kmh,speed_hi_kmh,snr_db,bit_errors,total_bits,"
    "ber,ber_ci_lo,ber_ci_hi,block_errors,total_blocks,bler,tx_power";

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"MU-MIMO OFDM link simulator: LMMSE and ML-enhanced receivers"};
    app.footer(kCsvFooter);
    app.require_subcommand(1);

    Overrides o;
    std::string out, data_dir, checkpoint, log_path;

    auto* show = app.add_subcommand("show-config", "Print the fully resolved configuration as JSON");
    add_common(show, o);

    auto* gen = app.add_subcommand("gen-data", "Generate a training dataset (binary blobs + JSON sidecars)");
    add_common(gen, o);
    gen->add_option("--out", out, "Output directory")->required();

    auto* train_cmd = app.add_subcommand("train", "Train ml_chest or ml_receiver parameters");
    add_common(train_cmd, o);
    train_cmd->add_option("--out", out, "Checkpoint path")->required();
    train_cmd->add_option("--data", data_dir, "Dataset directory from gen-data (generated on the fly when absent)");
    train_cmd->add_option("--log", log_path, "Training log CSV (step,loss,gamma)");
    train_cmd->add_option("--epochs", o.epochs, "Training epochs");
    train_cmd->add_option("--max-steps", o.max_steps, "Optimizer step cap (0 = none)");

    auto* eval = app.add_subcommand("eval", "Monte Carlo BER/BLER of one scheme");
    add_common(eval, o);
    eval->add_option("--checkpoint", checkpoint, "Trained parameters (required for ML schemes)");
    eval->add_option("--out", out, "Results CSV");

    auto* e2e = app.add_subcommand("e2e", "Train both ML schemes and evaluate all four schemes");
    add_common(e2e, o);
    e2e->add_option("--out", out, "Output directory")->required();
    e2e->add_option("--epochs", o.epochs, "Training epochs");
    e2e->add_option("--max-steps", o.max_steps, "Optimizer step cap (0 = none)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        std::cerr << app.help();
        return 2;
    }

    CLI::App* cmd = app.get_subcommands().front();
    try {
        SimConfig cfg = resolve(o, cmd);

        if (cmd == show) {
            json j = to_json(cfg);
            j["derived"] = derived_json(cfg);
            std::cout << j.dump(2) << '\n';
            return 0;
        }

        Simulator sim(cfg);

        if (cmd == gen) {
            const auto records = generate_records(sim, cfg.training.n_rgs, cfg.seed);
            save_dataset(out, cfg, records);
            std::cout << "wrote " << records.size() << " resource grids to " << out << '\n';
            return 0;
        }

        if (cmd == train_cmd) {
            if (!is_ml(cfg.scheme)) throw ConfigError("scheme", "train needs ml_chest or ml_receiver");
            std::vector<RgRecord> records;
            if (!data_dir.empty()) records = load_dataset(data_dir, cfg);
            const TrainOutcome t = train_from_config(cfg, sim, std::move(records), true);
            save_params(out, t.params, cfg);
            if (!log_path.empty()) write_train_log(log_path, t.result.log);
            print_train_summary(t);
            return 0;
        }

        if (cmd == eval) {
            std::optional<MlParams> params;
            if (is_ml(cfg.scheme)) {
                const std::string path = checkpoint.empty() ? cfg.checkpoint : checkpoint;
                if (path.empty())
                    throw std::runtime_error(std::string("scheme ") + to_string(cfg.scheme) +
                                             " needs --checkpoint (or \"checkpoint\" in the config)");
                params = load_params(path, cfg);
            }
            const auto rows = run_ber(cfg, params ? &*params : nullptr, &sim, &std::cerr);
            print_table(std::cout, rows);
            if (!out.empty()) write_csv(out, rows);
            return 0;
        }

        if (cmd == e2e) {
            namespace fs = std::filesystem;
            fs::create_directories(out);
            std::vector<ResultRow> all;
            for (Scheme s : {Scheme::Baseline, Scheme::PerfectCsi, Scheme::MlChest, Scheme::MlReceiver}) {
                SimConfig c = cfg;
                c.scheme = s;
                std::optional<MlParams> params;
                if (is_ml(s)) {
                    std::cerr << "training " << to_string(s) << '\n';
                    const TrainOutcome t = train_from_config(c, sim, {}, true);
                    const std::string base = (fs::path(out) / to_string(s)).string();
                    save_params(base + ".ckpt", t.params, c);
                    write_train_log(base + "_train.csv", t.result.log);
                    print_train_summary(t);
                    params = t.params;
                }
                const auto rows = run_ber(c, params ? &*params : nullptr, &sim, &std::cerr);
                all.insert(all.end(), rows.begin(), rows.end());
            }
            print_table(std::cout, all);
            write_csv((fs::path(out) / "results.csv").string(), all);
            return 0;
        }
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << '\n';
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
    return 0;
}
