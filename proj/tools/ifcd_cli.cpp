#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "ifcd/bench/experiment.hpp"
#include "ifcd/numerics/rng.hpp"

namespace fs = std::filesystem;
using namespace ifcd;
using bench::ExperimentConfig;
using bench::ValidationError;

namespace {

struct Common {
    std::string config_path;
    std::string outdir;
    std::string cache_dir;
    std::vector<std::uint64_t> seeds;
    std::size_t workers = 0;
    bool quiet = false;

    std::size_t vlm_steps = 0;
    std::size_t corpus_size = 0;
    std::size_t probe_pairs = 0;
    std::size_t active_sites = 0;
    std::vector<double> alpha;
    std::vector<double> beta;
    std::vector<double> gamma;
    std::vector<std::string> modes;
    std::size_t pope_scenes = 0;
    std::size_t caption_scenes = 0;
    std::size_t panel_size = 0;
};

void add_common(CLI::App* app, Common& c, bool needs_seed) {
    app->add_option("--config", c.config_path, "experiment config (JSON, unknown keys rejected)")
        ->check(CLI::ExistingFile);
    app->add_option("--outdir", c.outdir, "directory for every artifact of this run");
    app->add_option("--cache-dir", c.cache_dir, "checkpoint cache shared between runs (default: <outdir>/cache)");
    auto* seed = app->add_option("--seed", c.seeds, "seed; repeat the flag to run several seeds");
    if (needs_seed) {
        seed->required();
    }
    app->add_option("--workers", c.workers, "parallel grid points");
    app->add_flag("-q,--quiet", c.quiet, "no progress output");
    app->add_option("--vlm-steps", c.vlm_steps, "toy VLM training steps");
    app->add_option("--corpus-size", c.corpus_size, "training corpus draws");
    app->add_option("--probe-pairs", c.probe_pairs, "probe training pairs per site");
    app->add_option("--active-sites", c.active_sites, "number of top-ranked sites to edit");
    app->add_option("--alpha", c.alpha, "contrast strength")->expected(1);
    app->add_option("--beta", c.beta, "plausibility threshold")->expected(1);
    app->add_option("--gamma", c.gamma, "editing strength")->expected(1);
    app->add_option("--modes", c.modes, "decoding modes (comma separated)")->delimiter(',');
    app->add_option("--pope-scenes", c.pope_scenes, "scenes per POPE split");
    app->add_option("--caption-scenes", c.caption_scenes, "scenes for the caption task");
    app->add_option("--panel-size", c.panel_size, "prior-contradicting questions per seed");
}

ExperimentConfig resolve(const Common& c, bench::Task task) {
    ExperimentConfig cfg;
    if (!c.config_path.empty()) {
        cfg = bench::load_experiment_config(c.config_path);
    }
    cfg.task = task;
    if (!c.outdir.empty()) {
        cfg.outdir = c.outdir;
    }
    if (!c.cache_dir.empty()) {
        cfg.cache_dir = c.cache_dir;
    } else if (cfg.cache_dir.empty()) {
        cfg.cache_dir = (fs::path(cfg.outdir) / "cache").string();
    }
    if (!c.seeds.empty()) {
        cfg.seeds = c.seeds;
    }
    if (c.workers) cfg.workers = c.workers;
    if (c.vlm_steps) cfg.vlm.steps = c.vlm_steps;
    if (c.corpus_size) cfg.corpus_size = c.corpus_size;
    if (c.probe_pairs) cfg.probe_train_pairs = c.probe_pairs;
    if (c.active_sites) cfg.active_sites = c.active_sites;
    if (!c.alpha.empty()) cfg.decoding.alpha = c.alpha.front();
    if (!c.beta.empty()) cfg.decoding.beta = c.beta.front();
    if (!c.gamma.empty()) cfg.decoding.edit.gamma = c.gamma.front();
    if (!c.modes.empty()) {
        cfg.modes.clear();
        try {
            for (const auto& m : c.modes) {
                cfg.modes.push_back(decoder::mode_from_string(m));
            }
        } catch (const decoder::DecodeError& e) {
            throw ValidationError(e.what());
        }
    }
    if (c.pope_scenes) cfg.pope_scenes = c.pope_scenes;
    if (c.caption_scenes) cfg.caption_scenes = c.caption_scenes;
    if (c.panel_size) cfg.panel_size = c.panel_size;
    cfg.validate();
    return cfg;
}

std::ostream* log_stream(const Common& c) { return c.quiet ? nullptr : &std::cerr; }

int run_task(const Common& c, bench::Task task) {
    const auto cfg = resolve(c, task);
    bench::ArtifactStore store(cfg.cache_dir, log_stream(c));
    const auto report = bench::run_experiment(cfg, store, log_stream(c));
    bench::emit_report(report, cfg.outdir);
    std::cout << bench::results_csv(report.results);
    if (!c.quiet) {
        std::cerr << "wrote " << report.results.size() << " rows to " << (fs::path(cfg.outdir) / "results.csv").string()
                  << '\n';
    }
    return 0;
}

std::string join(const vlm::Words& w) {
    std::string out;
    for (const auto& s : w) {
        out += (out.empty() ? "" : " ") + s;
    }
    return out;
}

vlm::Words split_words(const std::string& s) {
    std::istringstream in(s);
    vlm::Words out;
    for (std::string w; in >> w;) {
        out.push_back(w);
    }
    return out;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Toy-scale truthfulness-editing contrastive decoding: data, training, decoding and benchmarks"};
    app.require_subcommand(1);

    Common gen_c;
    std::size_t gen_scenes = 200;
    std::size_t gen_corpus = 0;
    auto* gen = app.add_subcommand("gen-world", "write the world config, sample scenes and an optional corpus");
    add_common(gen, gen_c, false);
    gen->add_option("--scenes", gen_scenes, "scenes to sample");
    gen->add_option("--corpus", gen_corpus, "training examples to sample (0 = none)");

    Common tv_c;
    auto* train_vlm = app.add_subcommand("train-vlm", "train (or load from cache) the toy VLM");
    add_common(train_vlm, tv_c, true);

    Common tp_c;
    auto* train_probe = app.add_subcommand("train-probe", "train (or load from cache) the truthfulness probe");
    add_common(train_probe, tp_c, true);

    Common dec_c;
    std::string dec_mode = "ifcd_full";
    std::string dec_prompt;
    std::size_t dec_scene = 0;
    std::size_t dec_max = 0;
    auto* dec = app.add_subcommand("decode", "decode one prompt for one evaluation scene and write its trace");
    add_common(dec, dec_c, true);
    dec->add_option("--mode", dec_mode, "regular, editing_only, ifcd_wo_neg, ifcd_wo_pos or ifcd_full");
    dec->add_option("--prompt", dec_prompt, "space separated prompt words (default: caption prompt)");
    dec->add_option("--scene", dec_scene, "index into the seed's caption scenes");
    dec->add_option("--max-new-tokens", dec_max, "generation budget");

    Common pope_c;
    auto* pope = app.add_subcommand("eval-pope", "POPE-style yes/no probing over random/popular/adversarial splits");
    add_common(pope, pope_c, true);

    Common cap_c;
    auto* cap = app.add_subcommand("eval-caption", "caption task with CHAIR and BLEU");
    add_common(cap, cap_c, true);

    Common sweep_c;
    std::string axis = "gamma";
    auto* sweep = app.add_subcommand("sweep", "parameter sweeps");
    add_common(sweep, sweep_c, true);
    sweep->add_option("--axis", axis, "gamma (x active sites), alpha, max_tokens or train_size")
        ->check(CLI::IsMember({"gamma", "alpha", "max_tokens", "train_size"}));

    Common abl_c;
    auto* abl = app.add_subcommand("ablate", "caption metrics for every decoding mode");
    add_common(abl, abl_c, true);

    Common fig_c;
    auto* fig = app.add_subcommand("fig3", "prior-contradicting color panel under negative editing and disturbances");
    add_common(fig, fig_c, true);

    Common lat_c;
    auto* lat = app.add_subcommand("latent-plot", "2-D projection of the truth latent on held-out pairs");
    add_common(lat, lat_c, true);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 1;
    }

    try {
        if (*gen) {
            auto cfg = resolve(gen_c, bench::Task::pope);
            numerics::Rng rng(gen_c.seeds.empty() ? cfg.world.seed : gen_c.seeds.front());
            fs::create_directories(cfg.outdir);
            bench::write_text(fs::path(cfg.outdir) / "world.json", nlohmann::json(cfg.world).dump(2) + "\n");
            std::vector<vlm::SceneSpec> scenes;
            for (std::size_t i = 0; i < gen_scenes; ++i) {
                scenes.push_back(vlm::generate_scene(cfg.world, rng, i));
            }
            std::ofstream sc(fs::path(cfg.outdir) / "scenes.jsonl");
            vlm::write_scenes_jsonl(sc, cfg.world, scenes);
            if (gen_corpus > 0) {
                std::ofstream co(fs::path(cfg.outdir) / "corpus.jsonl");
                vlm::write_corpus_jsonl(co, vlm::build_corpus(cfg.world, gen_corpus, rng));
            }
            std::cout << "wrote " << gen_scenes << " scenes";
            if (gen_corpus > 0) {
                std::cout << " and " << gen_corpus << " training examples";
            }
            std::cout << " to " << cfg.outdir << '\n';
            return 0;
        }
        if (*train_vlm || *train_probe) {
            const auto& c = *train_vlm ? tv_c : tp_c;
            const auto cfg = resolve(c, bench::Task::pope);
            bench::ArtifactStore store(cfg.cache_dir, log_stream(c));
            fs::create_directories(cfg.outdir);
            for (auto seed : cfg.seeds) {
                const auto& model = store.model(cfg, seed);
                const auto stem = "seed" + std::to_string(seed);
                if (*train_vlm) {
                    const auto path = fs::path(cfg.outdir) / ("vlm-" + stem + ".json");
                    vlm::save_checkpoint(path.string(), model);
                    std::cout << path.string() << '\n';
                } else {
                    const auto& p = store.probe(cfg, seed);
                    const auto path = fs::path(cfg.outdir) / ("probe-" + stem + ".json");
                    probe::save_probe(path.string(), p, bench::ArtifactStore::probe_key(cfg, seed, cfg.probe_train_pairs));
                    std::cout << path.string() << '\n';
                    for (const auto& r : p.layer_ranking) {
                        std::cout << "  " << vlm::to_string(r.site) << " heldout_auc=" << bench::format_number(r.score)
                                  << '\n';
                    }
                }
            }
            return 0;
        }
        if (*dec) {
            const auto cfg = resolve(dec_c, bench::Task::caption);
            bench::ArtifactStore store(cfg.cache_dir, log_stream(dec_c));
            const auto seed = cfg.seeds.front();
            const auto& model = store.model(cfg, seed);
            auto dc = cfg.decoding;
            try {
                dc.mode = decoder::mode_from_string(dec_mode);
            } catch (const decoder::DecodeError& e) {
                throw ValidationError(e.what());
            }
            const probe::ProbeParams* p = nullptr;
            if (dc.mode != decoder::Mode::regular) {
                p = &store.probe(cfg, seed);
                dc.edit.active_sites = p->top_sites(cfg.active_sites);
            }
            dc.max_new_tokens = dec_max ? dec_max : cfg.caption_max_new_tokens;
            bench::SeedStreams streams(seed);
            const auto scenes = bench::draw_eval_scenes(cfg.world, std::max(cfg.caption_scenes, dec_scene + 1),
                                                        streams.caption);
            const auto& scene = scenes.at(dec_scene);
            const auto prompt = dec_prompt.empty() ? vlm::templates::caption_prompt() : split_words(dec_prompt);
            for (const auto& w : prompt) {
                if (!model.vocab.contains(w)) {
                    throw ValidationError("prompt word '" + w + "' is not in the vocabulary");
                }
            }
            const auto out = decoder::decode(model, p, scene.features, prompt, dc);
            fs::create_directories(cfg.outdir);
            const auto trace_path = fs::path(cfg.outdir) / "trace.jsonl";
            std::ofstream trace(trace_path);
            decoder::write_trace_jsonl(trace, out, model.vocab);
            std::cout << "scene: " << join(vlm::templates::caption(cfg.world, scene.scene)) << '\n';
            std::cout << "output: " << join(out.words(model.vocab)) << '\n';
            std::cout << "trace: " << trace_path.string() << '\n';
            return 0;
        }
        if (*pope) return run_task(pope_c, bench::Task::pope);
        if (*cap) return run_task(cap_c, bench::Task::caption);
        if (*abl) return run_task(abl_c, bench::Task::ablation);
        if (*fig) return run_task(fig_c, bench::Task::fig3_panel);
        if (*lat) return run_task(lat_c, bench::Task::latent_plot);
        if (*sweep) {
            const bench::Task task = axis == "gamma"   ? bench::Task::sweep_gamma_layers
                                     : axis == "alpha" ? bench::Task::sweep_alpha
                                     : axis == "max_tokens" ? bench::Task::sweep_max_tokens
                                                            : bench::Task::sweep_train_size;
            return run_task(sweep_c, task);
        }
    } catch (const ValidationError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 2;
    }
    return 0;
}
