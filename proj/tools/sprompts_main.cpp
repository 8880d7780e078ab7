// Batch entry points for the whole pipeline: pretrain the frozen backbone,
// run the incremental stream, sweep the comparison table, and render a run
// directory's report as CSV + SVG. Exit codes: 0 success, 1 usage error,
// 2 gate or assertion failure, 3 I/O failure.

#include <CLI11.hpp>

#include <cstdint>
#include <exception>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "sprompts/config.hpp"
#include "sprompts/data.hpp"
#include "sprompts/encoder.hpp"
#include "sprompts/engine.hpp"
#include "sprompts/harness.hpp"
#include "sprompts/report_render.hpp"
#include "sprompts/router.hpp"
#include "sprompts/store.hpp"

namespace fs = std::filesystem;
using namespace sprompts;

namespace {

constexpr const char* kCodeVersion = "sprompts 1.0.0";

class IoError : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

void write_text(const fs::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
    out << text;
    if (!out) throw IoError("failed while writing '" + path.string() + "'");
}

std::string read_text(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open '" + path.string() + "'");
    std::ostringstream buf;
    buf << in.rdbuf();
    return buf.str();
}

void ensure_dir(const fs::path& dir) {
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw IoError("cannot create directory '" + dir.string() + "': " + ec.message());
}

fs::path backbone_path(const fs::path& out_dir) { return out_dir / "backbone.ckpt"; }

fs::path session_path(const fs::path& out_dir, int s) {
    return out_dir / ("session_" + std::to_string(s) + ".ckpt");
}

store::LoadedBackbone load_backbone_or_explain(const fs::path& out_dir) {
    const fs::path path = backbone_path(out_dir);
    if (!fs::exists(path))
        throw IoError("no backbone checkpoint at '" + path.string() +
                      "'; run the pretrain command into this directory first");
    return store::load_backbone(path.string());
}

// The run must use the backbone it was pretrained for; a config edit that
// changes the encoder invalidates the checkpoint.
void check_encoder_match(const config::RunConfig& cfg, const encoder::Backbone& bb) {
    if (config::to_json(cfg.encoder).dump() != config::to_json(bb.config()).dump())
        throw harness::HarnessError(
            "the encoder section does not match the backbone checkpoint; rerun pretrain");
}

config::json provenance_stats(const encoder::PretrainStats& st) {
    config::json j;
    j["epochs_run"] = st.epochs_run;
    j["fc_accuracy"] = st.fc_accuracy;
    j["clip_accuracy"] = st.clip_accuracy;
    j["reached_gate"] = st.reached_gate;
    return j;
}

int cmd_pretrain(const std::string& config_path, const std::string& out_dir,
                 std::optional<std::uint64_t> seed) {
    config::RunConfig cfg = config::load_run_config(config_path);
    if (seed) cfg.pretrain.seed = *seed;
    ensure_dir(out_dir);

    auto corpus = data::pretrain_corpus(cfg.stream, cfg.pretrain.samples,
                                        cfg.pretrain.holdout_fraction, cfg.pretrain.seed);
    for (const auto& w : corpus.warnings) std::cout << "note: " << w << "\n";

    encoder::Backbone bb(cfg.encoder, cfg.pretrain.seed);
    std::cout << "pretraining " << bb.param_count() << " parameters on "
              << corpus.train.size() << " samples (holdout " << corpus.holdout.size()
              << ")\n";
    encoder::PretrainStats stats = bb.pretrain(corpus, cfg.pretrain);
    std::cout << "epochs_run=" << stats.epochs_run << " fc_accuracy=" << stats.fc_accuracy
              << " clip_accuracy=" << stats.clip_accuracy << "\n";
    if (!stats.reached_gate) {
        std::cerr << "pretrain gate not reached (threshold " << cfg.pretrain.threshold
                  << "); no checkpoint written\n";
        return 2;
    }
    bb.freeze();
    store::save_backbone(bb, stats, backbone_path(out_dir).string());
    const std::string fp = store::hash_hex(bb.fingerprint());
    write_text(out_dir + std::string("/backbone.fingerprint"), fp + "\n");
    std::cout << "backbone fingerprint " << fp << " written to "
              << backbone_path(out_dir).string() << "\n";
    return 0;
}

int cmd_run(const std::string& config_path, const std::string& out_dir,
            const std::string& mode, std::optional<std::uint64_t> seed, bool resume) {
    config::RunConfig cfg = config::load_run_config(config_path);
    if (seed) cfg.seed = *seed;
    if (!mode.empty()) cfg.modes = {engine::predict_mode_from_string(mode)};
    ensure_dir(out_dir);

    store::LoadedBackbone loaded = load_backbone_or_explain(out_dir);
    check_encoder_match(cfg, loaded.backbone);
    data::Stream stream = data::generate_stream(cfg.stream);

    std::vector<engine::SessionState> prefix;
    if (resume) {
        for (int s = 0; s < static_cast<int>(stream.domains.size()); ++s) {
            const fs::path p = session_path(out_dir, s);
            if (!fs::exists(p)) break;
            store::LoadedSession ls = store::load_session(p.string());
            if (ls.backbone_fingerprint != loaded.backbone.fingerprint())
                throw harness::HarnessError("checkpoint '" + p.string() +
                                            "' belongs to a different backbone");
            prefix.push_back(std::move(ls.state));
        }
        std::cout << "resuming from " << prefix.size() << " session checkpoint(s)\n";
    }

    harness::RunResult result = harness::run_dil(loaded.backbone, stream, cfg, prefix);

    if (cfg.keep_checkpoints)
        for (std::size_t s = 0; s < result.checkpoints.size(); ++s)
            store::save_session(result.checkpoints[s], result.backbone_fingerprint,
                                session_path(out_dir, static_cast<int>(s)).string());

    config::json report = harness::report_json(result);
    report["provenance"]["code_version"] = kCodeVersion;
    report["provenance"]["pretrain_stats"] = provenance_stats(loaded.stats);
    write_text(out_dir + std::string("/report.json"), report.dump(2) + "\n");
    for (const auto& f : render::report_csvs(report))
        write_text(out_dir + ("/" + f.name), f.text);

    for (const auto& mr : result.modes) {
        std::cout << engine::predict_mode_name(mr.mode) << ": ";
        if (result.incomplete)
            std::cout << "(incomplete)\n";
        else
            std::cout << "task_wise_aa=" << mr.task_wise_aa
                      << " forgetting=" << mr.forget.value
                      << " task_agnostic=" << mr.task_agnostic << "\n";
    }
    if (result.has_domain_id)
        std::cout << "domain_id average=" << result.domain_id.average << "\n";
    std::cout << "report written to " << out_dir << "/report.json\n";
    if (result.incomplete) {
        std::cerr << "run incomplete: " << result.error << "\n";
        return 2;
    }
    return 0;
}

int cmd_ablate(const std::string& config_path, const std::string& out_dir,
               std::optional<std::uint64_t> seed) {
    config::RunConfig cfg = config::load_run_config(config_path);
    if (seed) cfg.seed = *seed;
    ensure_dir(out_dir);

    store::LoadedBackbone loaded = load_backbone_or_explain(out_dir);
    check_encoder_match(cfg, loaded.backbone);
    data::Stream stream = data::generate_stream(cfg.stream);

    harness::AblationTable table = harness::ablation_suite(loaded.backbone, stream, cfg,
                                                           cfg.ablate);
    config::json tj = harness::ablation_json(table);
    {
        config::json prov;
        prov["config_digest"] = store::hash_hex(config::digest(config::to_json(cfg)));
        prov["backbone_fingerprint"] = store::hash_hex(loaded.backbone.fingerprint());
        prov["seed"] = cfg.seed;
        prov["code_version"] = kCodeVersion;
        tj["provenance"] = prov;
    }
    write_text(out_dir + std::string("/ablation.json"), tj.dump(2) + "\n");
    const render::NamedFile csv = render::ablation_csv(tj);
    write_text(out_dir + ("/" + csv.name), csv.text);

    int failed = 0;
    for (const auto& c : table.cells) {
        std::cout << c.group << "/" << c.label << ": ";
        if (c.ok)
            std::cout << "aa=" << c.aa << " forgetting=" << c.forgetting_value << "\n";
        else {
            std::cout << "FAILED: " << c.error << "\n";
            ++failed;
        }
    }
    std::cout << "comparison table written to " << out_dir << "/ablation.json ("
              << table.cells.size() << " cells, " << failed << " failed)\n";
    return 0;
}

int cmd_report(const std::string& run_dir, std::string out_dir) {
    if (out_dir.empty()) out_dir = run_dir;
    const fs::path report_path = fs::path(run_dir) / "report.json";
    if (!fs::exists(report_path))
        throw IoError("no report.json in '" + run_dir + "'; run a stream there first");
    ensure_dir(out_dir);

    config::json report = config::parse_json_text(read_text(report_path), "report.json");
    std::vector<render::NamedFile> files = render::report_csvs(report);
    for (auto& f : render::report_svgs(report)) files.push_back(std::move(f));

    const fs::path ablation_path = fs::path(run_dir) / "ablation.json";
    if (fs::exists(ablation_path)) {
        config::json table = config::parse_json_text(read_text(ablation_path), "ablation.json");
        files.push_back(render::ablation_csv(table));
        for (auto& f : render::ablation_svgs(table)) files.push_back(std::move(f));
    }

    for (const auto& f : files) {
        write_text(fs::path(out_dir) / f.name, f.text);
        std::cout << "wrote " << (fs::path(out_dir) / f.name).string() << "\n";
    }
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"prompt-pool domain-incremental learning pipeline"};
    app.require_subcommand(1);

    std::string config_path, out_dir, mode, run_dir;
    std::uint64_t seed_value = 0;
    bool resume = false;

    auto add_seed = [&](CLI::App* sub) {
        return sub->add_option("--seed", seed_value, "override the config's seed");
    };

    CLI::App* pre = app.add_subcommand("pretrain", "build and freeze the backbone");
    pre->add_option("--config", config_path, "run config JSON")->required();
    pre->add_option("--out", out_dir, "artifact directory")->required();
    CLI::Option* pre_seed = add_seed(pre);

    CLI::App* run = app.add_subcommand("run", "train the stream and write the report");
    run->add_option("--config", config_path, "run config JSON")->required();
    run->add_option("--out", out_dir, "artifact directory")->required();
    run->add_option("--mode", mode, "restrict evaluation to one mode")
        ->check(CLI::IsMember({"dil", "til", "random", "vote", "zero-shot"}));
    CLI::Option* run_seed = add_seed(run);
    run->add_flag("--resume", resume, "continue from session checkpoints in --out");

    CLI::App* abl = app.add_subcommand("ablate", "sweep the comparison table");
    abl->add_option("--config", config_path, "run config JSON")->required();
    abl->add_option("--out", out_dir, "artifact directory")->required();
    CLI::Option* abl_seed = add_seed(abl);

    CLI::App* rep = app.add_subcommand("report", "render a run directory as CSV + SVG");
    rep->add_option("run_dir", run_dir, "directory holding report.json")->required();
    rep->add_option("--out", out_dir, "where to write the rendered files");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : 1;
    }

    try {
        if (pre->parsed())
            return cmd_pretrain(config_path, out_dir,
                                pre_seed->count() ? std::optional<std::uint64_t>(seed_value)
                                                  : std::nullopt);
        if (run->parsed())
            return cmd_run(config_path, out_dir, mode,
                           run_seed->count() ? std::optional<std::uint64_t>(seed_value)
                                             : std::nullopt,
                           resume);
        if (abl->parsed())
            return cmd_ablate(config_path, out_dir,
                              abl_seed->count() ? std::optional<std::uint64_t>(seed_value)
                                                : std::nullopt);
        if (rep->parsed()) return cmd_report(run_dir, out_dir);
    } catch (const config::ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 1;
    } catch (const data::DataError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 1;
    } catch (const IoError& e) {
        std::cerr << "io error: " << e.what() << "\n";
        return 3;
    } catch (const store::StoreError& e) {
        std::cerr << "checkpoint error: " << e.what() << "\n";
        return 3;
    } catch (const fs::filesystem_error& e) {
        std::cerr << "io error: " << e.what() << "\n";
        return 3;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
    return 1;
}
