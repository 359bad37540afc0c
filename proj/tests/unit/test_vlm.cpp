#include <doctest.h>

#include <cmath>
#include <set>
#include <sstream>

#include "ifcd/numerics/rng.hpp"
#include "ifcd/vlm/model.hpp"
#include "test_support.hpp"

using namespace ifcd::vlm;
using ifcd::numerics::Rng;

namespace {

VlmHyper tiny_hyper() {
    VlmHyper h;
    h.d_model = 8;
    h.d_ff = 12;
    h.max_positions = 24;
    return h;
}

Sequence sample_sequence(const WorldConfig& cfg, const Vocab& vocab, Rng& rng) {
    const auto scene = generate_scene(cfg, rng);
    return make_sequence(vocab, scene_features(cfg, scene, rng), templates::color_question(cfg, 0), {"red"});
}

}  // namespace

TEST_CASE("degenerate world has a unique scene") {
    WorldConfig cfg;
    cfg.categories = {"dog"};
    cfg.colors = {"black"};
    cfg.max_count = 1;
    cfg.canonical_color = {{"dog", "black"}};
    Rng rng(1);
    for (int i = 0; i < 20; ++i) {
        const auto s = generate_scene(cfg, rng);
        REQUIRE(s.objects.size() == 1);
        CHECK(s.objects[0] == SceneObject{0, 0, 1});
    }
}

TEST_CASE("scenes are deterministic and well formed") {
    const auto cfg = WorldConfig::defaults();
    Rng a(42);
    Rng b(42);
    std::size_t non_canonical = 0;
    std::size_t objects = 0;
    for (int i = 0; i < 10000; ++i) {
        const auto s = generate_scene(cfg, a);
        CHECK(s == generate_scene(cfg, b));
        REQUIRE(!s.objects.empty());
        REQUIRE(s.objects.size() <= 3);
        std::set<std::size_t> cats;
        for (const auto& o : s.objects) {
            cats.insert(o.category);
            CHECK(o.count >= 1);
            CHECK(o.count <= cfg.max_count);
            CHECK(o.color < cfg.colors.size());
            non_canonical += o.color != cfg.canonical_color_index(o.category) ? 1 : 0;
            ++objects;
        }
        CHECK(cats.size() == s.objects.size());
    }
    const double rate = static_cast<double>(non_canonical) / static_cast<double>(objects);
    CHECK(rate >= 0.45);
    CHECK(rate <= 0.55);
}

TEST_CASE("config validation") {
    auto cfg = WorldConfig::defaults();
    cfg.bias_ratio = 1.5;
    CHECK_THROWS_AS(cfg.validate(), VlmError);
    cfg = WorldConfig::defaults();
    cfg.canonical_color["unicorn"] = "red";
    CHECK_THROWS_AS(cfg.validate(), VlmError);
    cfg = WorldConfig::defaults();
    cfg.colors.push_back("red");
    CHECK_THROWS_AS(cfg.validate(), VlmError);
    CHECK_THROWS(nlohmann::json::parse(R"({"bias":0.2})").get<WorldConfig>());
    const auto round = nlohmann::json(WorldConfig::defaults()).get<WorldConfig>();
    CHECK(nlohmann::json(round) == nlohmann::json(WorldConfig::defaults()));
}

TEST_CASE("corpus composition") {
    auto cfg = WorldConfig::defaults();
    cfg.bias_ratio = 0.0;
    Rng rng(3);
    for (const auto& ex : build_corpus(cfg, 500, rng)) {
        CHECK_FALSE(ex.text_only());
    }
    cfg.bias_ratio = 0.5;
    const auto corpus = build_corpus(cfg, 1000, rng);
    std::size_t prior = 0;
    for (const auto& ex : corpus) {
        prior += ex.text_only() ? 1 : 0;
    }
    CHECK(prior >= 460);
    CHECK(prior <= 540);
    CHECK_THROWS_AS(build_corpus(cfg, 0, rng), VlmError);
}

TEST_CASE("grounded captions only mention scene objects") {
    const auto cfg = WorldConfig::defaults();
    Rng rng(4);
    int captions = 0;
    for (int i = 0; i < 400; ++i) {
        const auto scene = generate_scene(cfg, rng);
        const auto ex = grounded_example(cfg, scene, rng);
        CHECK(ex.features.size() == scene.objects.size());
        if (ex.kind != ExampleKind::caption) {
            continue;
        }
        ++captions;
        for (const auto& w : ex.response) {
            const auto it = std::find(cfg.categories.begin(), cfg.categories.end(), w);
            if (it != cfg.categories.end()) {
                CHECK(scene.contains(static_cast<std::size_t>(it - cfg.categories.begin())));
            }
        }
    }
    CHECK(captions > 50);
}

TEST_CASE("tokenizer round trip over templates") {
    const auto cfg = WorldConfig::defaults();
    const auto vocab = Vocab::for_world(cfg);
    CHECK(vocab.size() < 50);
    Rng rng(5);
    for (int i = 0; i < 200; ++i) {
        const auto ex = grounded_example(cfg, generate_scene(cfg, rng), rng);
        CHECK(vocab.decode(vocab.encode(ex.prompt)) == ex.prompt);
        CHECK(vocab.decode(vocab.encode(ex.response)) == ex.response);
    }
    CHECK_THROWS_AS((void)vocab.id("zebra"), VlmError);
    CHECK_THROWS_AS((void)vocab.token(vocab.size()), VlmError);
    CHECK_THROWS_AS(Vocab({"<pad>", "<bos>", "<eos>", "a", "a"}), VlmError);
}

TEST_CASE("jsonl round trips") {
    const auto cfg = WorldConfig::defaults();
    Rng rng(6);
    std::vector<SceneSpec> scenes;
    for (std::size_t i = 0; i < 10; ++i) {
        scenes.push_back(generate_scene(cfg, rng, i));
    }
    std::stringstream ss;
    write_scenes_jsonl(ss, cfg, scenes);
    CHECK(read_scenes_jsonl(ss, cfg) == scenes);

    const auto corpus = build_corpus(cfg, 20, rng);
    std::stringstream cs;
    write_corpus_jsonl(cs, corpus);
    const auto back = read_corpus_jsonl(cs);
    REQUIRE(back.size() == corpus.size());
    for (std::size_t i = 0; i < corpus.size(); ++i) {
        CHECK(back[i].features == corpus[i].features);
        CHECK(back[i].response == corpus[i].response);
        CHECK(back[i].kind == corpus[i].kind);
    }
}

TEST_CASE("visual noise schedule") {
    const auto cfg = WorldConfig::defaults();
    Rng rng(7);
    const auto scene = generate_scene(cfg, rng);
    const auto f = scene_features(cfg, scene, rng);
    CHECK(add_visual_noise(f, 0, rng) == f);
    Rng r1(9);
    Rng r2(9);
    CHECK(add_visual_noise(f, 400, r1) == add_visual_noise(f, 400, r2));
    CHECK_THROWS_AS(add_visual_noise(f, 1001, rng), VlmError);
    CHECK_THROWS_AS(add_visual_noise(f, -1, rng), VlmError);
    CHECK(diffusion_alpha_bar(0) == 1.0);
    CHECK(diffusion_alpha_bar(1000) < 1e-3);

    // Correlation between clean and fully noised features, pooled over 100
    // samples and every feature dimension. Per-dimension correlations over
    // only 100 samples fluctuate by about 0.1 on their own.
    std::vector<double> xs;
    std::vector<double> ys;
    for (int i = 0; i < 100; ++i) {
        SceneSpec one{0, {generate_scene(cfg, rng).objects.front()}};
        const auto row = scene_features(cfg, one, rng);
        const auto noised = add_visual_noise(row, 1000, rng);
        xs.insert(xs.end(), row[0].begin(), row[0].end());
        ys.insert(ys.end(), noised[0].begin(), noised[0].end());
    }
    const double n = static_cast<double>(xs.size());
    double mx = 0, my = 0;
    for (std::size_t i = 0; i < xs.size(); ++i) {
        mx += xs[i] / n;
        my += ys[i] / n;
    }
    double sxy = 0, sxx = 0, syy = 0;
    for (std::size_t i = 0; i < xs.size(); ++i) {
        sxy += (xs[i] - mx) * (ys[i] - my);
        sxx += (xs[i] - mx) * (xs[i] - mx);
        syy += (ys[i] - my) * (ys[i] - my);
    }
    CHECK(std::abs(sxy / std::sqrt(sxx * syy)) < 0.2);
}

TEST_CASE("hooks are transparent and editing is applied in place") {
    const auto cfg = WorldConfig::defaults();
    const auto vocab = Vocab::for_world(cfg);
    Rng rng(8);
    auto params = ToyVlmParams::init(vocab, cfg.feature_dim(), VlmHyper{}, rng);
    const auto seq = sample_sequence(cfg, vocab, rng);

    const auto plain = forward(params, seq);
    CHECK(forward(params, seq).logits == plain.logits);

    auto cap = HookBundle::capture(all_sites(2));
    CHECK(forward(params, seq, &cap).logits == plain.logits);
    for (const auto& site : all_sites(2)) {
        CHECK(cap.captured(site).size() == seq.length());
    }

    std::map<LayerSite, HookBundle::Editor> identity;
    for (const auto& site : all_sites(2)) {
        identity[site] = [](std::span<const double> x, std::size_t) { return ifcd::numerics::Vec(x.begin(), x.end()); };
    }
    auto id_hooks = HookBundle::edit(identity);
    CHECK(forward(params, seq, &id_hooks).logits == plain.logits);

    const LayerSite site{1, SiteKind::ffn_output};
    auto shift = [](double gamma) {
        return [gamma](std::span<const double> x, std::size_t) {
            ifcd::numerics::Vec out(x.begin(), x.end());
            for (auto& v : out) {
                v += gamma * 1.0;
            }
            return out;
        };
    };
    auto zero_edit = HookBundle::edit({{site, shift(0.0)}});
    CHECK(forward(params, seq, &zero_edit).logits == plain.logits);
    auto real_edit = HookBundle::edit({{site, shift(0.5)}});
    CHECK(forward(params, seq, &real_edit).logits != plain.logits);

    // Captured value at a site equals what an editor receives.
    const auto captured = cap.captured(site);
    bool matched = true;
    auto probe = HookBundle::edit({{site, [&](std::span<const double> x, std::size_t t) {
                                        matched = matched && ifcd::numerics::Vec(x.begin(), x.end()) == captured[t];
                                        return ifcd::numerics::Vec(x.begin(), x.end());
                                    }}});
    forward(params, seq, &probe);
    CHECK(matched);
}

TEST_CASE("forward rejects bad inputs") {
    const auto cfg = WorldConfig::defaults();
    const auto vocab = Vocab::for_world(cfg);
    Rng rng(10);
    const auto params = ToyVlmParams::init(vocab, cfg.feature_dim(), tiny_hyper(), rng);
    Sequence seq;
    seq.tokens = {Vocab::bos, vocab.size()};
    CHECK_THROWS_AS(forward(params, seq), VlmError);
    seq.tokens = std::vector<TokenId>(30, Vocab::bos);
    CHECK_THROWS_AS(forward(params, seq), VlmError);
    seq.tokens = {Vocab::bos};
    seq.features = {ifcd::numerics::Vec(3, 0.0)};
    CHECK_THROWS_AS(forward(params, seq), VlmError);
}

TEST_CASE("toy VLM gradients match central differences") {
    const auto cfg = WorldConfig::defaults();
    const auto vocab = Vocab::for_world(cfg);
    for (std::uint64_t seed : {11u, 12u}) {
        for (bool tied : {true, false}) {
            Rng rng(seed);
            auto h = tiny_hyper();
            h.tie_embeddings = tied;
            auto params = ToyVlmParams::init(vocab, cfg.feature_dim(), h, rng);
            // Non-trivial layer-norm parameters and biases.
            for (auto s : params.spans()) {
                for (auto& v : s) {
                    v += 0.1 * rng.normal();
                }
            }
            const auto seq = sample_sequence(cfg, vocab, rng);
            std::vector<std::pair<std::size_t, TokenId>> targets;
            for (std::size_t r = 0; r < seq.length(); r += 2) {
                targets.emplace_back(r, rng.below(vocab.size()));
            }
            auto grads = params.zeros_like();
            loss_and_gradient(params, seq, targets, &grads);
            auto ps = params.spans();
            const auto gs = grads.spans();
            for (std::size_t b = 0; b < ps.size(); ++b) {
                const auto fd = ifcd::testing::central_difference(
                    ps[b], [&] { return loss_and_gradient(params, seq, targets, nullptr); });
                INFO("seed " << seed << " tied " << tied << " block " << b);
                // Key biases have an exactly zero gradient (softmax shift
                // invariance), so differences there are pure round-off.
                CHECK(ifcd::testing::max_relative_error(fd, gs[b], 1e-4) < 1e-4);
            }
        }
    }
}

TEST_CASE("training memorizes a single example and checkpoints round trip") {
    const auto cfg = WorldConfig::defaults();
    const auto vocab = Vocab::for_world(cfg);
    Rng rng(13);
    const std::vector<TrainingExample> corpus{grounded_example(cfg, generate_scene(cfg, rng), rng)};
    auto h = tiny_hyper();
    h.d_model = 16;
    h.d_ff = 16;
    h.steps = 300;
    h.batch_size = 1;
    h.lr = 1e-2;
    TrainStats stats;
    const auto params = train_toy_vlm(corpus, vocab, cfg.feature_dim(), h, &stats);
    CHECK(stats.loss_history.size() == 300);
    CHECK(corpus_loss(params, corpus) < 0.1);

    const auto back = checkpoint_from_json(nlohmann::json::parse(checkpoint_to_json(params).dump()));
    CHECK(back == params);

    CHECK_THROWS_AS(train_toy_vlm({}, vocab, cfg.feature_dim(), h), VlmError);
    h.lr = 1e200;
    h.steps = 50;
    CHECK_THROWS_AS(train_toy_vlm(corpus, vocab, cfg.feature_dim(), h), VlmError);
}

TEST_CASE("layer site names") {
    CHECK(to_string(LayerSite{1, SiteKind::ffn_output}) == "b1.ffn");
    CHECK(layer_site_from_string("b0.attn") == LayerSite{0, SiteKind::attention_output});
    CHECK_THROWS_AS(layer_site_from_string("b.ffn"), VlmError);
    CHECK_THROWS_AS(layer_site_from_string("b1.mlp"), VlmError);
}
