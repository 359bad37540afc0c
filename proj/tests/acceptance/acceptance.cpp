// End-to-end acceptance run: one PASS/FAIL line per criterion.
//
// Exit status is 0 once every criterion has been evaluated, whatever the
// verdicts; --strict makes any FAIL exit 3. Errors while running exit 2.

#include <CLI11.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <iostream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "../unit/metric_oracles.hpp"
#include "ifcd/bench/experiment.hpp"
#include "ifcd/bench/report.hpp"
#include "ifcd/decoder/ifcd.hpp"
#include "ifcd/eval/metrics.hpp"
#include "ifcd/numerics/rng.hpp"
#include "ifcd/probe/probe.hpp"
#include "ifcd/vlm/model.hpp"

namespace fs = std::filesystem;
using namespace ifcd;
using bench::ExperimentConfig;
using bench::Task;
using decoder::Mode;
using numerics::Rng;

namespace {

struct Verdict {
    int id = 0;
    std::string name;
    bool pass = false;
    std::string detail;
};

std::vector<Verdict> verdicts;

void report(int id, const std::string& name, bool pass, const std::string& detail) {
    verdicts.push_back({id, name, pass, detail});
    std::printf("criterion %2d %s  %-28s %s\n", id, pass ? "PASS" : "FAIL", name.c_str(), detail.c_str());
    std::fflush(stdout);
}

void info(const std::string& what) {
    std::printf("info         %s\n", what.c_str());
    std::fflush(stdout);
}

std::string fmt(double v, int digits = 4) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.*f", digits, v);
    return buf;
}

std::string sci(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.2e", v);
    return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

struct FdWorst {
    double rel = 0.0;
    double analytic = 0.0;
    double fd = 0.0;
    std::size_t coords = 0;
    std::size_t kink_retries = 0;

    void merge(const FdWorst& o) {
        coords += o.coords;
        kink_retries += o.kink_retries;
        if (o.rel > rel) {
            rel = o.rel;
            analytic = o.analytic;
            fd = o.fd;
        }
    }
    [[nodiscard]] std::string str() const {
        return sci(rel) + " (analytic " + sci(analytic) + ", fd " + sci(fd) + "; " + std::to_string(coords) +
               " coords, " + std::to_string(kink_retries) + " rechecked at h=1e-7)";
    }
};

// Central differences on a random subset of coordinates of `block`. A
// coordinate that misses at h=1e-5 is re-checked at h=1e-7: a ReLU input that
// sits within h of zero makes the wide step straddle the kink, whereas a wrong
// analytic gradient misses at both steps.
FdWorst fd_block_error(std::span<double> block, std::span<const double> analytic, const std::function<double()>& loss,
                       std::size_t max_coords, Rng& rng, double floor, double tol) {
    std::vector<std::size_t> idx(block.size());
    for (std::size_t i = 0; i < idx.size(); ++i) {
        idx[i] = i;
    }
    if (idx.size() > max_coords) {
        rng.shuffle(idx);
        idx.resize(max_coords);
    }
    FdWorst worst;
    for (auto i : idx) {
        const double saved = block[i];
        auto central = [&](double h) {
            block[i] = saved + h;
            const double up = loss();
            block[i] = saved - h;
            const double down = loss();
            block[i] = saved;
            return (up - down) / (2.0 * h);
        };
        auto rel = [&](double fd) { return std::abs(fd - analytic[i]) / std::max(std::abs(fd) + std::abs(analytic[i]), floor); };
        double fd = central(1e-5);
        FdWorst one{rel(fd), analytic[i], fd, 1, 0};
        if (one.rel >= tol) {
            fd = central(1e-7);
            one = {rel(fd), analytic[i], fd, 1, 1};
        }
        worst.merge(one);
    }
    return worst;
}

vlm::Words random_prompt(const vlm::WorldConfig& world, Rng& rng) {
    const auto cat = rng.below(world.categories.size());
    vlm::Words prompt;
    switch (rng.below(4)) {
        case 0: prompt = vlm::templates::caption_prompt(); break;
        case 1: prompt = vlm::templates::existence_question(world, cat); break;
        case 2: prompt = vlm::templates::color_question(world, cat); break;
        default: prompt = vlm::templates::count_question(world, cat); break;
    }
    if (rng.bernoulli(0.25)) {
        auto pre = vlm::templates::confused_prefix();
        pre.insert(pre.end(), prompt.begin(), prompt.end());
        prompt = pre;
    }
    return prompt;
}

void criterion_metric_oracles() {
    const auto t0 = std::chrono::steady_clock::now();
    Rng rng(20261016);
    const auto world = vlm::WorldConfig::defaults();
    const std::set<std::string> cats(world.categories.begin(), world.categories.end());
    double worst = 0.0;
    for (int trial = 0; trial < 100; ++trial) {
        const auto anns = testing::random_annotations(rng, cats, 1 + rng.below(8));
        const auto got = eval::chair_scores(anns);
        const auto want = testing::chair_oracle(anns);
        worst = std::max({worst, std::abs(got.chair_i - want.first), std::abs(got.chair_s - want.second)});
    }
    for (int trial = 0; trial < 100; ++trial) {
        std::vector<eval::PopeRecord> recs(1 + rng.below(600));
        const double p_yes = rng.uniform();
        for (std::size_t i = 0; i < recs.size(); ++i) {
            recs[i] = {i, rng.bernoulli(p_yes) ? eval::Answer::yes : eval::Answer::no,
                       rng.bernoulli(0.5) ? eval::Answer::yes : eval::Answer::no, eval::PopeStrategy::random};
        }
        const auto got = eval::pope_metrics(recs);
        const auto want = testing::pope_oracle(recs);
        worst = std::max({worst, std::abs(got.accuracy - want[0]), std::abs(got.precision - want[1]),
                          std::abs(got.recall - want[2]), std::abs(got.f1 - want[3])});
    }
    std::vector<std::string> words(world.categories.begin(), world.categories.end());
    words.insert(words.end(), {"one", "two", "red", "blue", "."});
    for (int trial = 0; trial < 100; ++trial) {
        std::vector<eval::Tokens> cands;
        std::vector<eval::Tokens> refs;
        for (auto n = 1 + rng.below(5); n > 0; --n) {
            eval::Tokens c;
            eval::Tokens r;
            for (auto i = rng.uniform_int(1, 14); i > 0; --i) {
                c.push_back(rng.choice(words));
            }
            // References share a prefix with the candidate so higher orders match too.
            r.assign(c.begin(), c.begin() + static_cast<long>(rng.below(c.size() + 1)));
            for (auto i = rng.uniform_int(0, 8); i > 0; --i) {
                r.push_back(rng.choice(words));
            }
            if (r.empty()) {
                r.push_back(".");
            }
            cands.push_back(c);
            refs.push_back(r);
        }
        worst = std::max(worst, std::abs(eval::bleu(cands, refs) - testing::bleu_oracle(cands, refs)));
    }
    report(2, "metric oracle equivalence", worst <= 1e-12,
           "max |diff| " + sci(worst) + " over 300 instances (" + fmt(seconds_since(t0), 1) + "s)");
}

void criterion_gradients() {
    const auto t0 = std::chrono::steady_clock::now();
    const auto world = vlm::WorldConfig::defaults();
    const auto vocab = vlm::Vocab::for_world(world);
    constexpr int draws = 20;
    // Entries whose exact gradient is zero (attention key biases) carry only
    // round-off of about eps * |loss| / h ~ 1e-10; the floor on the denominator
    // keeps them from dominating the ratio.
    constexpr double floor = 1e-4;
    FdWorst vlm_worst;
    for (int d = 0; d < draws; ++d) {
        Rng rng(5000 + d);
        vlm::VlmHyper h;
        h.tie_embeddings = d % 2 == 0;
        auto params = vlm::ToyVlmParams::init(vocab, world.feature_dim(), h, rng);
        for (auto s : params.spans()) {
            for (auto& v : s) {
                v += 0.1 * rng.normal();
            }
        }
        const auto scene = vlm::generate_scene(world, rng);
        const auto seq = vlm::make_sequence(vocab, vlm::scene_features(world, scene, rng), random_prompt(world, rng),
                                            {"yes"});
        std::vector<std::pair<std::size_t, vlm::TokenId>> targets;
        for (std::size_t r = rng.below(3); r < seq.length(); r += 1 + rng.below(3)) {
            targets.emplace_back(r, rng.below(vocab.size()));
        }
        auto grads = params.zeros_like();
        vlm::loss_and_gradient(params, seq, targets, &grads);
        auto ps = params.spans();
        const auto gs = grads.spans();
        for (std::size_t b = 0; b < ps.size(); ++b) {
            vlm_worst.merge(fd_block_error(ps[b], gs[b],
                                           [&] { return vlm::loss_and_gradient(params, seq, targets, nullptr); }, 24,
                                           rng, floor, 1e-4));
        }
    }
    FdWorst probe_worst;
    for (int d = 0; d < draws; ++d) {
        Rng rng(7000 + d);
        probe::ProbeHyper h;
        auto p = probe::init_site_probe({static_cast<std::size_t>(d % 2), vlm::SiteKind::ffn_output}, 32, h, rng);
        for (auto s : p.spans()) {
            for (auto& v : s) {
                v += 0.05 * rng.normal();
            }
        }
        std::vector<numerics::Vec> xs;
        std::vector<int> labels;
        for (int i = 0; i < 12; ++i) {
            numerics::Vec x(32);
            for (auto& v : x) {
                v = rng.normal();
            }
            xs.push_back(x);
            labels.push_back(i % 2);
        }
        const double lambda_c = rng.uniform(0.2, 2.0);
        auto grads = p.zeros_like();
        (void)probe::probe_loss(p, xs, labels, lambda_c, &grads);
        auto ps = p.spans();
        const auto gs = grads.spans();
        for (std::size_t b = 0; b < ps.size(); ++b) {
            probe_worst.merge(fd_block_error(
                ps[b], gs[b], [&] { return probe::probe_loss(p, xs, labels, lambda_c, nullptr).total; }, 48, rng,
                floor, 1e-4));
        }
    }
    report(3, "gradient correctness", std::max(vlm_worst.rel, probe_worst.rel) < 1e-4,
           "max rel err vlm " + vlm_worst.str() + ", probe " + probe_worst.str() + " over " + std::to_string(draws) +
               "+" + std::to_string(draws) + " draws, floor 1e-4 (" + fmt(seconds_since(t0), 1) + "s)");
}

void criterion_noop(const ExperimentConfig& cfg, bench::ArtifactStore& store, bench::MaskAudit& audit) {
    const auto t0 = std::chrono::steady_clock::now();
    const auto& model = store.model(cfg, 0);
    const auto& pr = store.probe(cfg, 0);
    auto ifcd_cfg = bench::seed_decoding(cfg, pr);
    ifcd_cfg.mode = Mode::ifcd_full;
    ifcd_cfg.alpha = 0.0;
    ifcd_cfg.edit.gamma = 0.0;
    auto regular = ifcd_cfg;
    regular.mode = Mode::regular;
    bench::SeedStreams streams(0);
    std::size_t mismatches = 0;
    std::size_t tokens = 0;
    constexpr int contexts = 1000;
    for (int i = 0; i < contexts; ++i) {
        const auto scene = vlm::generate_scene(cfg.world, streams.contexts, static_cast<std::size_t>(i));
        const auto features = vlm::scene_features(cfg.world, scene, streams.contexts);
        const auto prompt = random_prompt(cfg.world, streams.contexts);
        const std::size_t budget = 8 + streams.contexts.below(25);
        regular.max_new_tokens = budget;
        ifcd_cfg.max_new_tokens = budget;
        const auto a = decoder::decode(model, nullptr, features, prompt, regular);
        const auto b = decoder::decode(model, &pr, features, prompt, ifcd_cfg);
        audit.check(a);
        audit.check(b);
        tokens += a.tokens.size();
        mismatches += a.tokens == b.tokens ? 0 : 1;
    }
    report(1, "no-op equivalence", mismatches == 0,
           std::to_string(mismatches) + "/" + std::to_string(contexts) + " contexts differ, " + std::to_string(tokens) +
               " tokens compared (" + fmt(seconds_since(t0), 1) + "s)");
}

void criterion_probe_auc(const ExperimentConfig& cfg, bench::ArtifactStore& store) {
    double worst = 1.0;
    std::string detail;
    for (auto seed : cfg.seeds) {
        const auto& pr = store.probe(cfg, seed);
        for (std::size_t k = 0; k < cfg.active_sites; ++k) {
            const auto& r = pr.layer_ranking.at(k);
            worst = std::min(worst, r.score);
            detail += (detail.empty() ? "" : ", ") + std::string("s") + std::to_string(seed) + " " +
                      vlm::to_string(r.site) + " " + fmt(r.score, 3);
        }
    }
    report(5, "probe separation", worst >= 0.9, "min active-site AUC " + fmt(worst, 3) + " (" + detail + ")");
}

struct Run {
    bench::Report report;
    std::string csv;
};

Run run_and_emit(const ExperimentConfig& cfg, bench::ArtifactStore& store, const fs::path& outdir) {
    const auto t0 = std::chrono::steady_clock::now();
    Run r;
    r.report = bench::run_experiment(cfg, store, nullptr);
    r.csv = bench::results_csv(r.report.results);
    bench::emit_report(r.report, outdir);
    info(bench::to_string(cfg.task) + ": " + std::to_string(r.report.results.size()) + " rows in " +
         fmt(seconds_since(t0), 1) + "s -> " + outdir.string());
    return r;
}

// Mean of `metric` over rows matching every label in `where`.
double mean_of(const std::vector<bench::RunResult>& rows, const std::map<std::string, std::string>& where,
               const std::string& metric) {
    double sum = 0.0;
    int n = 0;
    for (const auto& r : rows) {
        bool ok = true;
        for (const auto& [k, v] : where) {
            ok = ok && r.label_at(k) == v;
        }
        if (ok) {
            sum += r.at(metric);
            ++n;
        }
    }
    if (n == 0) {
        throw std::runtime_error("no rows for metric " + metric);
    }
    return sum / n;
}

void audit_rows(const std::vector<bench::RunResult>& rows, bench::MaskAudit& audit) {
    for (const auto& r : rows) {
        for (const auto& [k, v] : r.metrics) {
            if (k == "steps") {
                audit.steps += static_cast<std::size_t>(v);
            } else if (k == "mask_violations") {
                audit.violations += static_cast<std::size_t>(v);
            }
        }
    }
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"acceptance run"};
    std::string cache_dir = "acceptance_cache";
    std::string outdir = "acceptance_out";
    std::size_t n_seeds = 5;
    std::size_t workers = std::max(1u, std::thread::hardware_concurrency());
    bool strict = false;
    app.add_option("--cache-dir", cache_dir, "checkpoint cache shared across runs");
    app.add_option("--outdir", outdir, "where experiment reports are written");
    app.add_option("--seeds", n_seeds, "number of seeds (0..n-1)")->check(CLI::Range(1, 100));
    app.add_option("--workers", workers)->check(CLI::PositiveNumber);
    app.add_flag("--strict", strict, "exit 3 when any criterion fails");
    CLI11_PARSE(app, argc, argv);

    try {
        const auto t0 = std::chrono::steady_clock::now();
        criterion_metric_oracles();
        criterion_gradients();

        ExperimentConfig cfg;
        cfg.cache_dir = cache_dir;
        cfg.workers = workers;
        cfg.seeds.clear();
        for (std::size_t s = 0; s < n_seeds; ++s) {
            cfg.seeds.push_back(s);
        }
        bench::ArtifactStore store(cache_dir, &std::cerr);
        for (auto seed : cfg.seeds) {
            (void)store.probe(cfg, seed);
        }
        info("artifacts ready for " + std::to_string(n_seeds) + " seeds (" + fmt(seconds_since(t0), 1) + "s elapsed)");

        bench::MaskAudit audit;
        criterion_noop(cfg, store, audit);
        criterion_probe_auc(cfg, store);

        const fs::path out(outdir);
        std::map<Task, Run> runs;

        auto panel_cfg = cfg;
        panel_cfg.task = Task::fig3_panel;
        runs[Task::fig3_panel] = run_and_emit(panel_cfg, store, out / "fig3_panel");
        {
            const auto& rows = runs[Task::fig3_panel].report.results;
            double worst = 1.0;
            double wo_pos = 0.0;
            std::string detail;
            for (const auto& r : rows) {
                if (r.label_at("condition") == "summary") {
                    worst = std::min(worst, r.at("monotone_fraction"));
                    wo_pos += r.at("wo_pos_below_regular") / static_cast<double>(n_seeds);
                    detail += (detail.empty() ? "" : " ") + fmt(r.at("monotone_fraction"), 2);
                }
            }
            std::string curve;
            for (double g : cfg.panel_gamma_grid) {
                curve += (curve.empty() ? "" : " ") +
                         fmt(mean_of(rows, {{"condition", "negative_edit"}, {"gamma", bench::format_number(g)}},
                                     "mean_p_prior"));
            }
            report(6, "hallucination amplification", worst >= 0.8,
                   "min monotone fraction " + fmt(worst, 2) + " (per seed " + detail + "); mean P(prior) over gamma " +
                       curve);
            info("panel: ifcd_wo_pos below regular on prior color for " + fmt(100.0 * wo_pos, 1) +
                 "% of items (reference 70%)");
            info("panel: mean P(prior) visual noise " +
                 fmt(mean_of(rows, {{"condition", "visual_noise"}}, "mean_p_prior")) + ", confused prefix " +
                 fmt(mean_of(rows, {{"condition", "confused_prefix"}}, "mean_p_prior")));
        }

        auto pope_cfg = cfg;
        pope_cfg.task = Task::pope;
        pope_cfg.modes = {Mode::regular, Mode::ifcd_full};
        runs[Task::pope] = run_and_emit(pope_cfg, store, out / "pope");
        {
            const auto& rows = runs[Task::pope].report.results;
            auto acc = [&](const char* mode, const char* split) {
                return mean_of(rows, {{"mode", mode}, {"strategy", split}}, "accuracy");
            };
            const double gain = acc("ifcd_full", "adversarial") - acc("regular", "adversarial");
            double worst_drop = -1.0;
            for (auto seed : cfg.seeds) {
                double reg = 0.0;
                double full = 0.0;
                for (const auto& r : rows) {
                    if (r.seed == seed && r.label_at("strategy") == "random") {
                        (r.label_at("mode") == "regular" ? reg : full) = r.at("accuracy");
                    }
                }
                worst_drop = std::max(worst_drop, reg - full);
            }
            report(7, "mitigation direction", gain >= 0.05 && worst_drop <= 0.01,
                   "adversarial gain " + fmt(100.0 * gain, 2) + " pts (need >= 5), worst random-split drop " +
                       fmt(100.0 * worst_drop, 2) + " pts (need <= 1)");
            info("pope regular accuracy random/popular/adversarial " + fmt(acc("regular", "random")) + " / " +
                 fmt(acc("regular", "popular")) + " / " + fmt(acc("regular", "adversarial")) + "; ifcd_full " +
                 fmt(acc("ifcd_full", "random")) + " / " + fmt(acc("ifcd_full", "popular")) + " / " +
                 fmt(acc("ifcd_full", "adversarial")));
        }

        auto abl_cfg = cfg;
        abl_cfg.task = Task::ablation;
        runs[Task::ablation] = run_and_emit(abl_cfg, store, out / "ablation");
        {
            const auto& rows = runs[Task::ablation].report.results;
            std::map<std::string, double> chair;
            std::string detail;
            for (auto m : decoder::all_modes()) {
                const auto name = decoder::to_string(m);
                chair[name] = mean_of(rows, {{"mode", name}}, "chair_s");
                detail += (detail.empty() ? "" : ", ") + name + " " + fmt(chair[name]);
            }
            const bool lowest =
                chair["ifcd_full"] < chair["regular"] && chair["ifcd_full"] < chair["editing_only"];
            report(8, "ablation ordering", lowest, "mean chair_s: " + detail);
        }

        auto len_cfg = cfg;
        len_cfg.task = Task::sweep_max_tokens;
        len_cfg.modes = {Mode::regular, Mode::ifcd_full};
        runs[Task::sweep_max_tokens] = run_and_emit(len_cfg, store, out / "sweep_max_tokens");
        {
            const auto& rows = runs[Task::sweep_max_tokens].report.results;
            bool ok = true;
            std::string detail;
            for (auto t : cfg.max_tokens_grid) {
                const auto len = std::to_string(t);
                const double reg = mean_of(rows, {{"mode", "regular"}, {"max_new_tokens", len}}, "chair_i");
                const double full = mean_of(rows, {{"mode", "ifcd_full"}, {"max_new_tokens", len}}, "chair_i");
                ok = ok && full <= reg;
                detail += (detail.empty() ? "" : ", ") + len + ": " + fmt(reg) + " vs " + fmt(full);
            }
            report(9, "robust long generation", ok, "chair_i regular vs ifcd_full at " + detail);
        }

        for (const auto& [task, run] : runs) {
            audit_rows(run.report.results, audit);
        }
        report(4, "plausibility soundness", audit.violations == 0 && audit.steps > 0,
               std::to_string(audit.violations) + " violating steps out of " + std::to_string(audit.steps));

        // Reruns: a fresh store reloads every checkpoint from disk, and a small
        // config is trained from scratch twice with no cache at all.
        std::string detail;
        bool same = true;
        {
            bench::ArtifactStore reload(cache_dir);
            for (const auto& [task, run] : runs) {
                auto c = cfg;
                c.task = task;
                if (task == Task::pope || task == Task::sweep_max_tokens) {
                    c.modes = {Mode::regular, Mode::ifcd_full};
                }
                const auto again = bench::results_csv(bench::run_experiment(c, reload, nullptr).results);
                const bool eq = again == run.csv && again == bench::read_text(out / bench::to_string(task) / "results.csv");
                same = same && eq;
                detail += (detail.empty() ? "" : ", ") + bench::to_string(task) + (eq ? " same" : " DIFFERS");
            }
        }
        {
            ExperimentConfig small;
            small.task = Task::pope;
            small.corpus_size = 3000;
            small.vlm.steps = 400;
            small.pope_scenes = 30;
            small.probe_train_pairs = 60;
            small.probe_heldout_pairs = 40;
            small.seeds = {7};
            std::string first;
            for (int round = 0; round < 2; ++round) {
                bench::ArtifactStore fresh;
                const auto csv = bench::results_csv(bench::run_experiment(small, fresh, nullptr).results);
                if (round == 0) {
                    first = csv;
                } else {
                    const bool eq = csv == first;
                    same = same && eq;
                    detail += std::string(", fresh-training pope ") + (eq ? "same" : "DIFFERS");
                }
            }
        }
        report(10, "reproducibility", same, "results.csv byte comparison: " + detail);

        std::sort(verdicts.begin(), verdicts.end(), [](const Verdict& a, const Verdict& b) { return a.id < b.id; });
        std::size_t passed = 0;
        std::printf("\nsummary (%.0fs)\n", seconds_since(t0));
        for (const auto& v : verdicts) {
            passed += v.pass ? 1 : 0;
            std::printf("  %2d %s %s\n", v.id, v.pass ? "PASS" : "FAIL", v.name.c_str());
        }
        std::printf("%zu/%zu criteria pass\n", passed, verdicts.size());
        return strict && passed != verdicts.size() ? 3 : 0;
    } catch (const std::exception& e) {
        std::cerr << "acceptance run aborted: " << e.what() << '\n';
        return 2;
    }
}
