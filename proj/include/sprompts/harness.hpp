#pragma once

// Incremental-learning evaluation harness. Trains the session stream in
// order, fills a lower-triangular accuracy matrix per prediction mode, and
// derives the headline metrics: average accuracy, forgetting, task-agnostic
// accuracy, routing accuracy, and held-out-domain tables. The assembled
// report is a pure function of (stream, config, backbone), so two identical
// runs serialize to identical bytes.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "sprompts/config.hpp"
#include "sprompts/data.hpp"
#include "sprompts/encoder.hpp"
#include "sprompts/engine.hpp"
#include "sprompts/router.hpp"
#include "sprompts/store.hpp"

namespace sprompts::harness {

class HarnessError : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

// ---- accuracy matrix and scalar metrics ----

// Lower-triangular record: rows[l][t] is accuracy on test set t after
// completing session l, defined only for t <= l. Cells above the diagonal
// are absent rather than zero.
struct AccuracyMatrix {
    std::vector<std::vector<double>> rows;

    int sessions() const { return static_cast<int>(rows.size()); }

    void validate() const {
        for (std::size_t l = 0; l < rows.size(); ++l)
            if (rows[l].size() != l + 1)
                throw HarnessError("AccuracyMatrix: row " + std::to_string(l) + " has " +
                                   std::to_string(rows[l].size()) + " cells, expected " +
                                   std::to_string(l + 1));
    }
};

struct AverageAccuracy {
    double task_wise = 0.0;
    std::vector<double> running_curve; // running_curve[l] = mean over t<=l of rows[l][t]
};

inline AverageAccuracy average_accuracy(const AccuracyMatrix& m) {
    m.validate();
    if (m.rows.empty()) throw HarnessError("average_accuracy: empty matrix");
    AverageAccuracy out;
    for (const auto& row : m.rows) {
        double s = 0.0;
        for (double v : row) s += v;
        out.running_curve.push_back(s / static_cast<double>(row.size()));
    }
    out.task_wise = out.running_curve.back();
    return out;
}

struct ForgettingResult {
    double value = 0.0;
    bool defined = false; // single-session runs pin the value to 0 and clear this
};

// Mean over earlier tasks of the drop from best historical accuracy to final
// accuracy, signed so that forgetting is negative. A task that improved at
// the end contributes zero drop rather than a positive offset, so the result
// never exceeds 0 and is exactly 0 when nothing was lost.
inline ForgettingResult forgetting(const AccuracyMatrix& m) {
    m.validate();
    if (m.rows.empty()) throw HarnessError("forgetting: empty matrix");
    const std::size_t s = m.rows.size();
    if (s == 1) return {0.0, false};
    double sum = 0.0;
    for (std::size_t t = 0; t + 1 < s; ++t) {
        double best = -std::numeric_limits<double>::infinity();
        for (std::size_t l = t; l + 1 < s; ++l) best = std::max(best, m.rows[l][t]);
        sum += std::min(0.0, m.rows[s - 1][t] - best);
    }
    return {sum / static_cast<double>(s - 1), true};
}

// Sample-weighted accuracy over the pooled test sets: total hits over total
// size, as opposed to the domain-weighted mean the matrix rows average.
inline double task_agnostic_accuracy(const std::vector<std::int64_t>& hits,
                                     const std::vector<std::int64_t>& sizes) {
    if (hits.size() != sizes.size())
        throw HarnessError("task_agnostic_accuracy: hits and sizes disagree in length");
    std::int64_t h = 0, n = 0;
    for (std::size_t i = 0; i < hits.size(); ++i) {
        if (sizes[i] < 0 || hits[i] < 0 || hits[i] > sizes[i])
            throw HarnessError("task_agnostic_accuracy: invalid counts at domain " +
                               std::to_string(i));
        h += hits[i];
        n += sizes[i];
    }
    if (n == 0) throw HarnessError("task_agnostic_accuracy: empty pool");
    return static_cast<double>(h) / static_cast<double>(n);
}

// ---- cell evaluation ----

namespace detail {

inline std::vector<const data::Image*> pointers(const data::LabeledDataset& ds) {
    std::vector<const data::Image*> p(ds.size());
    for (std::size_t i = 0; i < p.size(); ++i) p[i] = &ds.images[i];
    return p;
}

inline int argmax_class(const std::vector<float>& probs) {
    int best = 0;
    for (std::size_t j = 1; j < probs.size(); ++j)
        if (probs[j] > probs[static_cast<std::size_t>(best)]) best = static_cast<int>(j);
    return best;
}

// Order-sensitive digest over a prediction batch: every probability at full
// bit precision plus the domain each sample resolved to.
inline std::uint64_t prediction_digest(const std::vector<engine::Prediction>& preds) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    auto eat = [&h](const unsigned char* b, std::size_t n) {
        for (std::size_t i = 0; i < n; ++i) {
            h ^= b[i];
            h *= 0x100000001b3ULL;
        }
    };
    for (const auto& p : preds) {
        eat(reinterpret_cast<const unsigned char*>(p.probs.data()),
            p.probs.size() * sizeof(float));
        const auto d = static_cast<std::uint64_t>(p.domain);
        unsigned char db[8];
        for (int i = 0; i < 8; ++i) db[i] = static_cast<unsigned char>((d >> (8 * i)) & 0xff);
        eat(db, 8);
    }
    return h;
}

} // namespace detail

struct CellEval {
    double accuracy = 0.0;
    std::int64_t hits = 0;
    std::int64_t size = 0;
    std::string digest; // 16 hex chars over probabilities and routed domains
};

// One test set under one mode against a state holding l+1 sessions. The
// (l, t) tags pin the random mode's per-sample draws to the evaluation slot,
// so identical runs replay identical choices.
inline CellEval evaluate_cell(const encoder::Backbone& backbone, const engine::SessionState& st,
                              const data::LabeledDataset& test_set, engine::PredictMode mode,
                              std::uint64_t run_seed, int l, int t) {
    if (test_set.size() == 0) throw HarnessError("evaluate_cell: empty test set");
    engine::PredictContext ctx;
    ctx.mode = mode;
    ctx.til_domain = t;
    ctx.run_seed = run_seed;
    ctx.tag_a = static_cast<std::uint64_t>(l);
    ctx.tag_b = static_cast<std::uint64_t>(t);
    auto preds = engine::predict_batch(backbone, st, detail::pointers(test_set), ctx);
    CellEval out;
    out.size = static_cast<std::int64_t>(test_set.size());
    for (std::size_t i = 0; i < preds.size(); ++i)
        if (detail::argmax_class(preds[i].probs) == test_set.labels[i]) out.hits += 1;
    out.accuracy = static_cast<double>(out.hits) / static_cast<double>(out.size);
    out.digest = store::hash_hex(detail::prediction_digest(preds));
    return out;
}

// ---- routing accuracy and held-out domains ----

struct DomainIdResult {
    std::vector<double> per_domain;
    double average = 0.0; // task-wise mean, each domain weighted equally
};

// Fraction of each seen domain's test features the router sends home, using
// the final centroid table.
inline DomainIdResult domain_id_accuracy(const encoder::Backbone& backbone,
                                         const engine::SessionState& st,
                                         const data::Stream& stream) {
    if (st.sessions == 0) throw HarnessError("domain_id_accuracy: no completed sessions");
    if (static_cast<int>(stream.domains.size()) < st.sessions)
        throw HarnessError("domain_id_accuracy: stream is missing seen domains");
    DomainIdResult out;
    double sum = 0.0;
    for (int d = 0; d < st.sessions; ++d) {
        const auto& ts = stream.domains[static_cast<std::size_t>(d)].test;
        if (ts.size() == 0) throw HarnessError("domain_id_accuracy: empty test set");
        auto feats = engine::prompt_free_features(backbone, detail::pointers(ts));
        std::int64_t hit = 0;
        for (const auto& f : feats)
            if (router::identify_domain(f, st.centroids, st.config.knn_k) == d) hit += 1;
        out.per_domain.push_back(static_cast<double>(hit) / static_cast<double>(ts.size()));
        sum += out.per_domain.back();
    }
    out.average = sum / static_cast<double>(st.sessions);
    return out;
}

struct OodTable {
    std::vector<std::string> columns;      // seen stream domains, then held-out sets
    std::vector<std::vector<double>> rows; // row per checkpoint; NaN = not yet seen
};

// Re-evaluates every retained checkpoint on all stream and held-out test
// sets with free routing. Seen-domain cells repeat the accuracy matrix
// computation bit for bit; held-out inputs still land on some learned
// domain because the router is closed-world.
inline OodTable ood_eval(const encoder::Backbone& backbone,
                         const std::vector<engine::SessionState>& checkpoints,
                         const data::Stream& stream, std::uint64_t run_seed) {
    const std::size_t s = stream.domains.size();
    if (checkpoints.size() != s)
        throw HarnessError("ood_eval: have " + std::to_string(checkpoints.size()) +
                           " checkpoints for " + std::to_string(s) + " sessions");
    OodTable out;
    for (const auto& d : stream.domains) out.columns.push_back(d.name);
    for (const auto& d : stream.ood) out.columns.push_back(d.name);
    const double nan = std::numeric_limits<double>::quiet_NaN();
    for (std::size_t l = 0; l < s; ++l) {
        const auto& st = checkpoints[l];
        if (st.sessions != static_cast<int>(l) + 1)
            throw HarnessError("ood_eval: checkpoint " + std::to_string(l) + " holds " +
                               std::to_string(st.sessions) + " sessions, expected " +
                               std::to_string(l + 1));
        std::vector<double> row;
        for (std::size_t t = 0; t < s; ++t)
            row.push_back(t <= l
                              ? evaluate_cell(backbone, st, stream.domains[t].test,
                                              engine::PredictMode::dil, run_seed,
                                              static_cast<int>(l), static_cast<int>(t))
                                    .accuracy
                              : nan);
        for (std::size_t o = 0; o < stream.ood.size(); ++o)
            row.push_back(evaluate_cell(backbone, st, stream.ood[o].test,
                                        engine::PredictMode::dil, run_seed, static_cast<int>(l),
                                        static_cast<int>(s + o))
                              .accuracy);
        out.rows.push_back(std::move(row));
    }
    return out;
}

// ---- full run ----

struct SessionRecord {
    engine::TrainSummary summary;
    std::int64_t floats_added = 0;    // accounting formula for this session
    std::int64_t floats_measured = 0; // state float-count delta, must match
    double relative_increase = 0.0;   // formula floats over backbone parameter count
    bool resumed = false;             // restored from a checkpoint, not retrained
};

struct ModeResult {
    engine::PredictMode mode = engine::PredictMode::dil;
    AccuracyMatrix matrix;
    std::vector<std::vector<std::string>> digests;   // triangular, mirrors matrix
    std::vector<std::vector<std::int64_t>> hits;     // triangular, raw hit counts
    double task_wise_aa = 0.0;
    std::vector<double> running_curve;
    ForgettingResult forget;
    double task_agnostic = 0.0;
};

struct RunResult {
    config::RunConfig cfg;
    std::uint64_t backbone_fingerprint = 0;
    std::int64_t backbone_params = 0;
    std::vector<std::string> domain_names;
    std::vector<std::string> ood_names;
    std::vector<std::int64_t> train_sizes;
    std::vector<std::int64_t> test_sizes;
    std::vector<SessionRecord> sessions;
    std::vector<ModeResult> modes;
    DomainIdResult domain_id;
    bool has_domain_id = false;
    OodTable ood;
    bool has_ood = false;
    bool incomplete = false;
    std::string error;
    std::vector<engine::SessionState> checkpoints; // per completed session when kept
    engine::SessionState final_state;
};

// Trains one session per stream domain in order; after each session,
// evaluates every seen test set under every requested mode against the live
// state. A session failure stops the run and flags the report incomplete,
// keeping all rows already finished. Metrics over the matrix are derived
// only from complete runs.
//
// `resume` may carry checkpoint states for a prefix of the sessions; those
// sessions are restored instead of retrained (their rows are still
// re-evaluated) and training picks up at the first missing session.
inline RunResult run_dil(const encoder::Backbone& backbone, const data::Stream& stream,
                         const config::RunConfig& cfg,
                         const std::vector<engine::SessionState>& resume = {}) {
    cfg.validate();
    if (!backbone.frozen()) throw HarnessError("run_dil: backbone must be frozen");
    if (stream.domains.empty()) throw HarnessError("run_dil: stream has no domains");
    if (stream.domains.size() != cfg.stream.domains.size())
        throw HarnessError("run_dil: stream does not match the config's domain list");
    if (resume.size() > stream.domains.size())
        throw HarnessError("run_dil: more resume checkpoints than stream domains");
    const std::string want_method = config::to_json(cfg.method).dump();
    for (std::size_t s = 0; s < resume.size(); ++s) {
        if (resume[s].sessions != static_cast<int>(s) + 1)
            throw HarnessError("run_dil: resume checkpoint " + std::to_string(s) + " holds " +
                               std::to_string(resume[s].sessions) + " sessions, expected " +
                               std::to_string(s + 1));
        if (config::to_json(resume[s].config).dump() != want_method)
            throw HarnessError("run_dil: resume checkpoint " + std::to_string(s) +
                               " was trained under a different method config");
    }

    RunResult r;
    r.cfg = cfg;
    r.backbone_fingerprint = backbone.fingerprint();
    r.backbone_params = backbone.param_count();
    for (const auto& d : stream.domains) {
        r.domain_names.push_back(d.name);
        r.train_sizes.push_back(static_cast<std::int64_t>(d.train.size()));
        r.test_sizes.push_back(static_cast<std::int64_t>(d.test.size()));
    }
    for (const auto& d : stream.ood) r.ood_names.push_back(d.name);
    r.modes.resize(cfg.modes.size());
    for (std::size_t m = 0; m < cfg.modes.size(); ++m) r.modes[m].mode = cfg.modes[m];

    engine::SessionState st;
    st.config = cfg.method;
    const int s_total = static_cast<int>(stream.domains.size());
    std::int64_t prev_floats = 0;
    for (int s = 0; s < s_total; ++s) {
        try {
            SessionRecord rec;
            if (static_cast<std::size_t>(s) < resume.size()) {
                st = resume[static_cast<std::size_t>(s)];
                rec.resumed = true;
                rec.summary.session = s;
                rec.summary.train_accuracy = std::numeric_limits<double>::quiet_NaN();
            } else {
                rec.summary = engine::train_session(
                    backbone, stream.domains[static_cast<std::size_t>(s)].train, st, cfg.seed);
            }
            rec.floats_added = engine::session_param_growth(cfg.method, backbone.config(), s);
            const std::int64_t now = engine::state_float_count(st);
            rec.floats_measured = now - prev_floats;
            rec.relative_increase =
                static_cast<double>(rec.floats_added) / static_cast<double>(r.backbone_params);

            // evaluate the full row for every mode before committing anything,
            // so a failed cell cannot leave a ragged matrix behind
            std::vector<std::vector<double>> acc(r.modes.size());
            std::vector<std::vector<std::string>> dig(r.modes.size());
            std::vector<std::vector<std::int64_t>> hit(r.modes.size());
            for (std::size_t m = 0; m < r.modes.size(); ++m)
                for (int t = 0; t <= s; ++t) {
                    auto cell =
                        evaluate_cell(backbone, st, stream.domains[static_cast<std::size_t>(t)].test,
                                      r.modes[m].mode, cfg.seed, s, t);
                    acc[m].push_back(cell.accuracy);
                    dig[m].push_back(cell.digest);
                    hit[m].push_back(cell.hits);
                }

            prev_floats = now;
            r.sessions.push_back(rec);
            for (std::size_t m = 0; m < r.modes.size(); ++m) {
                r.modes[m].matrix.rows.push_back(std::move(acc[m]));
                r.modes[m].digests.push_back(std::move(dig[m]));
                r.modes[m].hits.push_back(std::move(hit[m]));
            }
            if (cfg.keep_checkpoints) r.checkpoints.push_back(st);
        } catch (const std::exception& e) {
            r.incomplete = true;
            r.error = "session " + std::to_string(s) + ": " + e.what();
            break;
        }
    }

    if (!r.incomplete) {
        for (auto& mr : r.modes) {
            auto aa = average_accuracy(mr.matrix);
            mr.task_wise_aa = aa.task_wise;
            mr.running_curve = std::move(aa.running_curve);
            mr.forget = forgetting(mr.matrix);
            // prediction is row-independent, so pooled-set predictions equal
            // the concatenated per-set predictions already counted
            mr.task_agnostic = task_agnostic_accuracy(mr.hits.back(), r.test_sizes);
        }
        r.domain_id = domain_id_accuracy(backbone, st, stream);
        r.has_domain_id = true;
        if (cfg.keep_checkpoints) {
            r.ood = ood_eval(backbone, r.checkpoints, stream, cfg.seed);
            r.has_ood = true;
        }
    }
    r.final_state = std::move(st);
    return r;
}

// ---- report serialization ----

namespace detail {

inline config::json num_or_null(double v) {
    if (std::isnan(v)) return nullptr;
    return v;
}

} // namespace detail

// Deterministic JSON document for a run. Contains no timestamps, paths, or
// environment data; identical (stream, config, backbone) inputs serialize
// to identical bytes.
inline config::json report_json(const RunResult& r) {
    using config::json;
    json j;
    j["kind"] = "eval_report";
    j["format_version"] = 1;
    {
        json cfg_json = config::to_json(r.cfg);
        json prov;
        prov["config_digest"] = store::hash_hex(config::digest(cfg_json));
        prov["backbone_fingerprint"] = store::hash_hex(r.backbone_fingerprint);
        prov["seed"] = r.cfg.seed;
        prov["backbone_params"] = r.backbone_params;
        j["provenance"] = prov;
        j["config"] = std::move(cfg_json);
    }
    {
        json s;
        s["domains"] = r.domain_names;
        s["ood"] = r.ood_names;
        s["train_sizes"] = r.train_sizes;
        s["test_sizes"] = r.test_sizes;
        j["stream"] = s;
    }
    {
        json rows = json::array();
        for (const auto& s : r.sessions) {
            json row;
            row["session"] = s.summary.session;
            row["resumed"] = s.resumed;
            row["steps"] = s.summary.steps;
            row["final_loss"] = s.summary.final_loss;
            row["train_accuracy"] = detail::num_or_null(s.summary.train_accuracy);
            row["floats_added"] = s.floats_added;
            row["floats_measured"] = s.floats_measured;
            row["relative_increase"] = s.relative_increase;
            rows.push_back(std::move(row));
        }
        j["sessions"] = rows;
    }
    {
        json modes;
        for (const auto& mr : r.modes) {
            json m;
            m["matrix"] = mr.matrix.rows;
            m["hits"] = mr.hits;
            m["digests"] = mr.digests;
            if (r.incomplete) {
                m["task_wise_aa"] = nullptr;
                m["running_curve"] = nullptr;
                m["forgetting"] = nullptr;
                m["forgetting_defined"] = nullptr;
                m["task_agnostic"] = nullptr;
            } else {
                m["task_wise_aa"] = mr.task_wise_aa;
                m["running_curve"] = mr.running_curve;
                m["forgetting"] = mr.forget.value;
                m["forgetting_defined"] = mr.forget.defined;
                m["task_agnostic"] = mr.task_agnostic;
            }
            modes[engine::predict_mode_name(mr.mode)] = std::move(m);
        }
        j["modes"] = modes;
    }
    if (r.has_domain_id) {
        json d;
        d["per_domain"] = r.domain_id.per_domain;
        d["average"] = r.domain_id.average;
        j["domain_id"] = d;
    } else {
        j["domain_id"] = nullptr;
    }
    if (r.has_ood) {
        json o;
        o["columns"] = r.ood.columns;
        json rows = json::array();
        for (const auto& row : r.ood.rows) {
            json cells = json::array();
            for (double v : row) cells.push_back(detail::num_or_null(v));
            rows.push_back(std::move(cells));
        }
        o["rows"] = rows;
        j["ood"] = o;
    } else {
        j["ood"] = nullptr;
    }
    j["incomplete"] = r.incomplete;
    j["error"] = r.error;
    return j;
}

// ---- ablation suite ----

struct AblationCell {
    std::string group;
    std::string label;
    bool ok = false;
    double aa = 0.0;
    double forgetting_value = 0.0;
    bool forgetting_defined = false;
    std::string error;
};

struct AblationTable {
    std::vector<AblationCell> cells;
};

namespace detail {

// Free-routing matrix over prepared per-session states (checkpoints whose
// routing settings may have been swapped out).
inline AccuracyMatrix dil_matrix(const encoder::Backbone& backbone, const data::Stream& stream,
                                 const std::vector<engine::SessionState>& states,
                                 std::uint64_t run_seed) {
    AccuracyMatrix m;
    for (std::size_t l = 0; l < states.size(); ++l) {
        std::vector<double> row;
        for (std::size_t t = 0; t <= l; ++t)
            row.push_back(evaluate_cell(backbone, states[l], stream.domains[t].test,
                                        engine::PredictMode::dil, run_seed, static_cast<int>(l),
                                        static_cast<int>(t))
                              .accuracy);
        m.rows.push_back(std::move(row));
    }
    return m;
}

inline AblationCell metric_cell(std::string group, std::string label, const AccuracyMatrix& m) {
    AblationCell c;
    c.group = std::move(group);
    c.label = std::move(label);
    auto aa = average_accuracy(m);
    auto f = forgetting(m);
    c.ok = true;
    c.aa = aa.task_wise;
    c.forgetting_value = f.value;
    c.forgetting_defined = f.defined;
    return c;
}

inline AblationCell error_cell(std::string group, std::string label, const std::string& why) {
    AblationCell c;
    c.group = std::move(group);
    c.label = std::move(label);
    c.ok = false;
    c.error = why;
    return c;
}

} // namespace detail

// Comparison table around one base configuration: the prediction-mode
// alternatives, the parameter-sharing ablations (retrained), and sweeps over
// clustering size, routing neighbours, and both prompt lengths. Each cell
// records task-wise AA and forgetting; a failed cell records its error and
// the suite continues.
inline AblationTable ablation_suite(const encoder::Backbone& backbone, const data::Stream& stream,
                                    const config::RunConfig& base,
                                    const config::SweepGrids& grids = {}) {
    config::RunConfig base_cfg = base;
    base_cfg.modes = {engine::PredictMode::dil, engine::PredictMode::random_domain,
                      engine::PredictMode::vote, engine::PredictMode::zero_shot};
    base_cfg.keep_checkpoints = true;
    RunResult base_run = run_dil(backbone, stream, base_cfg);
    if (base_run.incomplete)
        throw HarnessError("ablation_suite: base run failed: " + base_run.error);

    AblationTable table;
    for (const auto& mr : base_run.modes) {
        AblationCell c;
        c.group = "mode";
        c.label = engine::predict_mode_name(mr.mode);
        c.ok = true;
        c.aa = mr.task_wise_aa;
        c.forgetting_value = mr.forget.value;
        c.forgetting_defined = mr.forget.defined;
        table.cells.push_back(std::move(c));
    }

    // parameter-sharing ablations retrain from scratch under the same stream
    for (engine::Ablation abl : {engine::Ablation::shared_prompts_dependent,
                                 engine::Ablation::frozen_language_prompts}) {
        const std::string label = engine::ablation_name(abl);
        try {
            config::RunConfig cfg2 = base;
            cfg2.method.ablation = abl;
            cfg2.modes = {engine::PredictMode::dil};
            cfg2.keep_checkpoints = false;
            RunResult rr = run_dil(backbone, stream, cfg2);
            if (rr.incomplete) throw HarnessError(rr.error);
            AblationCell c;
            c.group = "ablation";
            c.label = label;
            c.ok = true;
            c.aa = rr.modes[0].task_wise_aa;
            c.forgetting_value = rr.modes[0].forget.value;
            c.forgetting_defined = rr.modes[0].forget.defined;
            table.cells.push_back(std::move(c));
        } catch (const std::exception& e) {
            table.cells.push_back(detail::error_cell("ablation", label, e.what()));
        }
    }

    // clustering-size sweep: prompts do not depend on the cluster count, so
    // re-cluster the recorded features and re-route from the checkpoints
    const std::size_t s_total = stream.domains.size();
    std::vector<std::vector<std::vector<float>>> feats(s_total);
    for (std::size_t d = 0; d < s_total; ++d)
        feats[d] = engine::prompt_free_features(backbone,
                                                detail::pointers(stream.domains[d].train));
    for (int k : grids.kmeans_k) {
        const std::string label = "K=" + std::to_string(k);
        try {
            std::vector<std::vector<std::vector<float>>> cents(s_total);
            for (std::size_t d = 0; d < s_total; ++d)
                cents[d] = router::kmeans_fit(feats[d], k,
                                              derive_seed(base.seed, "kmeans",
                                                          static_cast<std::uint64_t>(d)))
                               .centroids;
            std::vector<engine::SessionState> states;
            for (std::size_t l = 0; l < s_total; ++l) {
                engine::SessionState st = base_run.checkpoints[l];
                st.config.kmeans_k = k;
                st.centroids = router::CentroidTable{};
                for (std::size_t d = 0; d <= l; ++d)
                    st.centroids.append(static_cast<std::int64_t>(d), cents[d]);
                states.push_back(std::move(st));
            }
            table.cells.push_back(detail::metric_cell(
                "kmeans_k", label, detail::dil_matrix(backbone, stream, states, base.seed)));
        } catch (const std::exception& e) {
            table.cells.push_back(detail::error_cell("kmeans_k", label, e.what()));
        }
    }

    // neighbour-count sweep reuses the trained centroids and just re-routes
    for (int k : grids.knn_k) {
        const std::string label = "knn_k=" + std::to_string(k);
        try {
            std::vector<engine::SessionState> states;
            for (std::size_t l = 0; l < s_total; ++l) {
                engine::SessionState st = base_run.checkpoints[l];
                st.config.knn_k = k;
                states.push_back(std::move(st));
            }
            table.cells.push_back(detail::metric_cell(
                "knn_k", label, detail::dil_matrix(backbone, stream, states, base.seed)));
        } catch (const std::exception& e) {
            table.cells.push_back(detail::error_cell("knn_k", label, e.what()));
        }
    }

    // prompt-length sweeps retrain because the parameters change shape
    auto length_sweep = [&](const std::string& group, const std::vector<int>& grid,
                            auto apply) {
        for (int v : grid) {
            const std::string label = group + "=" + std::to_string(v);
            try {
                config::RunConfig cfg2 = base;
                apply(cfg2.method, v);
                cfg2.modes = {engine::PredictMode::dil};
                cfg2.keep_checkpoints = false;
                RunResult rr = run_dil(backbone, stream, cfg2);
                if (rr.incomplete) throw HarnessError(rr.error);
                AblationCell c;
                c.group = group;
                c.label = label;
                c.ok = true;
                c.aa = rr.modes[0].task_wise_aa;
                c.forgetting_value = rr.modes[0].forget.value;
                c.forgetting_defined = rr.modes[0].forget.defined;
                table.cells.push_back(std::move(c));
            } catch (const std::exception& e) {
                table.cells.push_back(detail::error_cell(group, label, e.what()));
            }
        }
    };
    length_sweep("L_i", grids.prompt_len,
                 [](engine::MethodConfig& mc, int v) { mc.prompt_len = v; });
    length_sweep("L_l", grids.lang_prompt_len,
                 [](engine::MethodConfig& mc, int v) { mc.lang_prompt_len = v; });

    return table;
}

inline config::json ablation_json(const AblationTable& t) {
    using config::json;
    json rows = json::array();
    for (const auto& c : t.cells) {
        json row;
        row["group"] = c.group;
        row["label"] = c.label;
        row["ok"] = c.ok;
        if (c.ok) {
            row["aa"] = c.aa;
            row["forgetting"] = c.forgetting_value;
            row["forgetting_defined"] = c.forgetting_defined;
        } else {
            row["aa"] = nullptr;
            row["forgetting"] = nullptr;
            row["forgetting_defined"] = nullptr;
        }
        row["error"] = c.error;
        rows.push_back(std::move(row));
    }
    json j;
    j["kind"] = "ablation_table";
    j["format_version"] = 1;
    j["cells"] = rows;
    return j;
}

} // namespace sprompts::harness
