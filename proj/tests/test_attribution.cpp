#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>
#include <filesystem>

#include "doctest.h"
#include "neglab/attribution.hpp"
#include "neglab/errors.hpp"
#include "support.hpp"

using namespace neglab;

namespace {

TraceRecord traced_forward(const Model& model, const std::vector<int>& tokens) {
    return model.forward(tokens, TraceRequest::everything(model.config().n_layers));
}

// SAE with orthonormal decoder rows and tied encoder, zero biases
SAEModel orthonormal_sae(size_t d) {
    SAEModel sae;
    sae.enc_weight = Tensor({d, d});
    sae.dec_weight = Tensor({d, d});
    for (size_t i = 0; i < d; ++i) {
        sae.enc_weight.at(i, i) = 1.0f;
        sae.dec_weight.at(i, i) = 1.0f;
    }
    sae.enc_bias = Tensor({d});
    sae.dec_bias = Tensor({d});
    return sae;
}

SAEModel random_sae(size_t d, size_t latents, uint64_t seed) {
    Rng rng(seed);
    SAEModel sae;
    sae.enc_weight = Tensor({latents, d});
    sae.enc_weight.data = rng.gaussian_vector(latents * d, 0.0f, 0.3f);
    sae.enc_bias = Tensor({latents});
    sae.enc_bias.data = rng.gaussian_vector(latents, 0.0f, 0.1f);
    sae.dec_weight = Tensor({latents, d});
    sae.dec_weight.data = rng.gaussian_vector(latents * d, 0.0f, 0.3f);
    sae.dec_bias = Tensor({d});
    sae.dec_bias.data = rng.gaussian_vector(d, 0.0f, 0.1f);
    return sae;
}

}  // namespace

TEST_CASE("contrast direction is the difference of unembedding rows") {
    auto lab = testsup::load_toy_lab(false);
    const ContrastDirection dir = contrast_direction(lab.model->weights(), 10, 20);
    const Tensor& unembed = lab.model->weights().get("unembed.weight");
    for (size_t i = 0; i < dir.d.size(); ++i) {
        CHECK(dir.d[i] == unembed.at(10, i) - unembed.at(20, i));  // bit-exact
    }
    CHECK_THROWS_AS(contrast_direction(lab.model->weights(), -1, 0), DataError);
}

TEST_CASE("component contribution") {
    auto lab = testsup::load_toy_lab(false);
    const size_t d = static_cast<size_t>(lab.config.d_model);
    const ContrastDirection dir = contrast_direction(lab.model->weights(), 3, 4);

    SUBCASE("zero input contributes zero") {
        const std::vector<float> zero(d, 0.0f);
        CHECK(component_contribution(std::span<const float>(zero.data(), d), dir, 1.5f,
                                     lab.model->weights(), lab.config) == 0.0f);
    }
    SUBCASE("linearity") {
        Rng rng(3);
        for (int trial = 0; trial < 50; ++trial) {
            const auto a = rng.gaussian_vector(d, 0.0f, 1.0f);
            const auto b = rng.gaussian_vector(d, 0.0f, 1.0f);
            std::vector<float> ab(d);
            for (size_t i = 0; i < d; ++i) ab[i] = a[i] + b[i];
            const float ca = component_contribution(std::span<const float>(a.data(), d), dir, 2.0f,
                                                    lab.model->weights(), lab.config);
            const float cb = component_contribution(std::span<const float>(b.data(), d), dir, 2.0f,
                                                    lab.model->weights(), lab.config);
            const float cab = component_contribution(std::span<const float>(ab.data(), d), dir,
                                                     2.0f, lab.model->weights(), lab.config);
            CHECK(std::fabs(ca + cb - cab) < 1e-4f);
        }
    }
    SUBCASE("sigma must be positive") {
        const std::vector<float> x(d, 1.0f);
        CHECK_THROWS_AS(component_contribution(std::span<const float>(x.data(), d), dir, 0.0f,
                                               lab.model->weights(), lab.config),
                        DataError);
    }
    SUBCASE("C(h_{L+1}) equals the logit difference under the run's own sigma") {
        auto tokens = encode_prompt(*lab.tokenizer, lab.config, "An animal that is not");
        const TraceRecord trace = lab.model->forward(tokens);
        const int pos = trace.readout_pos;
        const float sigma = trace.final_norm_scale[static_cast<size_t>(pos)];
        const auto h = trace.final_hidden.row(static_cast<size_t>(pos));
        const float c = component_contribution(h, dir, sigma, lab.model->weights(), lab.config);
        const float delta = logit_diff_from(trace, dir);
        CHECK(std::fabs(c - delta) < 1e-4f);
    }
}

TEST_CASE("ledger closes against the model's logit difference") {
    auto lab = testsup::load_toy_lab(false);
    Rng rng(19);
    for (int trial = 0; trial < 100; ++trial) {
        const auto tokens = testsup::random_prompt(rng, lab.config.vocab_size, 2, 10);
        int a = static_cast<int>(rng.below(static_cast<uint32_t>(lab.config.vocab_size)));
        int b = static_cast<int>(rng.below(static_cast<uint32_t>(lab.config.vocab_size)));
        if (a == b) b = (b + 1) % lab.config.vocab_size;
        const ContrastDirection dir = contrast_direction(lab.model->weights(), a, b);
        const TraceRecord trace = traced_forward(*lab.model, tokens);
        const ContributionLedger ledger =
            build_ledger(trace, dir, lab.model->weights(), lab.config);
        const double denom = std::max(1.0, std::fabs(static_cast<double>(ledger.total_delta)));
        CHECK(std::fabs(ledger.component_sum() + ledger.bias_term - ledger.total_delta) / denom <
              1e-3);
    }
}

TEST_CASE("ledger also closes for a layernorm model with biases") {
    auto cfg = testsup::tiny_config(2, 16, 2, 30);
    cfg.norm_kind = NormKind::LayerNorm;
    cfg.positional_kind = PositionalKind::LearnedAbsolute;
    cfg.activation = ActivationKind::Gelu;
    cfg.attn_bias = true;
    cfg.mlp_bias = true;
    Weights w = seeded_init(cfg, 21);
    // non-trivial final-norm shift so the bias term matters
    Rng rng(22);
    w.tensors["final_norm.beta"].data = rng.gaussian_vector(16, 0.0f, 0.5f);
    const Model model(cfg, std::move(w));
    for (int trial = 0; trial < 20; ++trial) {
        const auto tokens = testsup::random_prompt(rng, cfg.vocab_size, 2, 8);
        const ContrastDirection dir = contrast_direction(model.weights(), 1, 2);
        const TraceRecord trace = traced_forward(model, tokens);
        const ContributionLedger ledger = build_ledger(trace, dir, model.weights(), cfg);
        const double denom = std::max(1.0, std::fabs(static_cast<double>(ledger.total_delta)));
        CHECK(std::fabs(ledger.component_sum() + ledger.bias_term - ledger.total_delta) / denom <
              1e-3);
        CHECK(ledger.bias_term != 0.0f);
    }
}

TEST_CASE("contrastive scores") {
    auto lab = testsup::load_toy_lab(false);
    const ContrastDirection dir = contrast_direction(lab.model->weights(), 5, 6);
    const auto tokens_a = encode_prompt(*lab.tokenizer, lab.config, "An animal that is not");
    const auto tokens_b = encode_prompt(*lab.tokenizer, lab.config, "An animal that is indeed");
    const TraceRecord ta = traced_forward(*lab.model, tokens_a);
    const TraceRecord tb = traced_forward(*lab.model, tokens_b);

    SUBCASE("identical traces give all-zero scores") {
        const ContrastiveScores s =
            contrastive_scores(ta, ta, dir, lab.model->weights(), lab.config);
        CHECK(s.embedding == 0.0f);
        for (float v : s.attn) CHECK(v == 0.0f);
        for (float v : s.mlp) CHECK(v == 0.0f);
    }
    SUBCASE("swapping the runs negates every score") {
        const ContrastiveScores ab =
            contrastive_scores(ta, tb, dir, lab.model->weights(), lab.config);
        const ContrastiveScores ba =
            contrastive_scores(tb, ta, dir, lab.model->weights(), lab.config);
        CHECK(ab.embedding == doctest::Approx(-ba.embedding));
        for (size_t i = 0; i < ab.attn.size(); ++i) {
            CHECK(ab.attn[i] == doctest::Approx(-ba.attn[i]));
            CHECK(ab.mlp[i] == doctest::Approx(-ba.mlp[i]));
        }
    }
    SUBCASE("scores sum to the difference of the two deltas") {
        const ContrastiveScores s =
            contrastive_scores(ta, tb, dir, lab.model->weights(), lab.config);
        double total = s.embedding;
        for (float v : s.attn) total += v;
        for (float v : s.mlp) total += v;
        // oracle: two plain forwards
        const double want = static_cast<double>(logit_diff_from(ta, dir)) -
                            static_cast<double>(logit_diff_from(tb, dir));
        CHECK(std::fabs(total - want) < 1e-3);
    }
}

TEST_CASE("select_critical_mlps") {
    SUBCASE("identical maps intersect to the top-n set") {
        const std::vector<float> scores = {0.1f, 0.9f, 0.5f, 0.7f, 0.3f};
        const auto sel = select_critical_mlps(scores, scores, 3);
        CHECK(sel == std::set<int>{1, 2, 3});
    }
    SUBCASE("disjoint top sets give the empty set") {
        const std::vector<float> a = {9, 8, 0, 0};
        const std::vector<float> b = {0, 0, 9, 8};
        CHECK(select_critical_mlps(a, b, 2).empty());
    }
    SUBCASE("planted dominant block survives the intersection") {
        // small distinct background scores, ordered differently in the two
        // maps, so the left-over top-10 slots never coincide
        std::vector<float> a(30), b(30);
        for (int l = 0; l < 30; ++l) {
            a[static_cast<size_t>(l)] = 0.01f * static_cast<float>(l);
            b[static_cast<size_t>(l)] = 0.01f * static_cast<float>(29 - l);
        }
        for (int l = 17; l <= 25; ++l) {
            a[static_cast<size_t>(l)] = 5.0f + static_cast<float>(l);
            b[static_cast<size_t>(l)] = 7.0f + static_cast<float>(25 - l);
        }
        const auto sel = select_critical_mlps(a, b, 10);
        for (int l : sel) {
            CHECK(l >= 17);
            CHECK(l <= 25);
        }
        CHECK(!sel.empty());
    }
    SUBCASE("invariant under positive monotone rescaling") {
        const std::vector<float> a = {0.1f, 0.9f, 0.5f, 0.7f, 0.3f};
        const std::vector<float> b = {0.2f, 0.1f, 0.8f, 0.6f, 0.4f};
        std::vector<float> a2(a), b2(b);
        for (auto& v : a2) v = 3.0f * v + 10.0f;
        for (auto& v : b2) v = std::exp(v);
        CHECK(select_critical_mlps(a, b, 3) == select_critical_mlps(a2, b2, 3));
    }
}

TEST_CASE("sae encode/decode") {
    SUBCASE("orthonormal construction recovers the coefficients") {
        const size_t d = 12;
        SAEModel sae = orthonormal_sae(d);
        std::vector<float> x(d, 0.0f);
        for (size_t i = 0; i < d; ++i) {
            x[i] += 3.0f * sae.dec_weight.at(5, i) + 0.5f * sae.dec_weight.at(9, i);
        }
        const auto alpha = sae_encode(sae, std::span<const float>(x.data(), d));
        for (size_t j = 0; j < d; ++j) {
            if (j == 5) CHECK(alpha[j] == doctest::Approx(3.0f));
            else if (j == 9) CHECK(alpha[j] == doctest::Approx(0.5f));
            else CHECK(alpha[j] == 0.0f);
        }
        const auto back = sae_decode(sae, std::span<const float>(alpha.data(), alpha.size()));
        for (size_t i = 0; i < d; ++i) CHECK(back[i] == doctest::Approx(x[i]).epsilon(1e-5));
    }
    SUBCASE("relu encoder output is non-negative") {
        const SAEModel sae = random_sae(8, 16, 31);
        Rng rng(32);
        const auto x = rng.gaussian_vector(8, 0.0f, 1.0f);
        for (float a : sae_encode(sae, std::span<const float>(x.data(), 8))) {
            CHECK(a >= 0.0f);
        }
    }
    SUBCASE("topk encoder keeps at most k live latents") {
        SAEModel sae = random_sae(8, 16, 33);
        sae.topk = true;
        sae.k = 3;
        Rng rng(34);
        const auto x = rng.gaussian_vector(8, 0.0f, 1.0f);
        const auto alpha = sae_encode(sae, std::span<const float>(x.data(), 8));
        size_t live = 0;
        for (float a : alpha) {
            if (a != 0.0f) ++live;
        }
        CHECK(live <= 3);
    }
    SUBCASE("dimension mismatch") {
        const SAEModel sae = random_sae(8, 16, 35);
        std::vector<float> bad(9, 0.0f);
        CHECK_THROWS_AS(sae_encode(sae, std::span<const float>(bad.data(), 9)), ShapeError);
    }
}

TEST_CASE("sae files round-trip") {
    const SAEModel sae = random_sae(8, 16, 36);
    const std::string path =
        (std::filesystem::temp_directory_path() / "neglab_sae_rt.safetensors").string();
    save_sae(path, sae);
    const SAEModel back = load_sae(path);
    CHECK(back.enc_weight.data == sae.enc_weight.data);
    CHECK(back.dec_bias.data == sae.dec_bias.data);
    CHECK(back.topk == false);
    std::filesystem::remove(path);
}

TEST_CASE("latent ledger closes: latents + error == component contribution") {
    auto lab = testsup::load_toy_lab(false);
    const size_t d = static_cast<size_t>(lab.config.d_model);
    const ContrastDirection dir = contrast_direction(lab.model->weights(), 8, 9);
    Rng rng(40);
    for (int trial = 0; trial < 50; ++trial) {
        const SAEModel sae = random_sae(d, 96, 500 + static_cast<uint64_t>(trial));
        const auto x = rng.gaussian_vector(d, 0.0f, 1.0f);
        const LatentAttribution la =
            latent_attribution(std::span<const float>(x.data(), d), sae, dir, 1.3f,
                               lab.model->weights(), lab.config);
        double sum = la.error_term;
        for (const auto& [idx, c] : la.ranked) sum += c;
        CHECK(std::fabs(sum - la.total) < 1e-4);
    }
}

TEST_CASE("a latent aligned with the contrast direction ranks first") {
    auto lab = testsup::load_toy_lab(false);
    const size_t d = static_cast<size_t>(lab.config.d_model);
    const ContrastDirection dir = contrast_direction(lab.model->weights(), 8, 9);

    SAEModel sae = orthonormal_sae(d);
    // overwrite latent 7's decoder row with the (normalized) direction and
    // its encoder row to match, so latent 7 fires along d
    double dn = 0.0;
    for (float v : dir.d) dn += static_cast<double>(v) * v;
    dn = std::sqrt(dn);
    for (size_t i = 0; i < d; ++i) {
        const float u = static_cast<float>(dir.d[i] / dn);
        sae.dec_weight.at(7, i) = u;
        sae.enc_weight.at(7, i) = u;
    }
    // input along the direction
    std::vector<float> x(d);
    for (size_t i = 0; i < d; ++i) x[i] = 2.0f * sae.dec_weight.at(7, i);
    const LatentAttribution la = latent_attribution(std::span<const float>(x.data(), d), sae, dir,
                                                    1.0f, lab.model->weights(), lab.config);
    REQUIRE(!la.ranked.empty());
    CHECK(la.ranked[0].first == 7);
}

TEST_CASE("bundled sae assets load and validate against the toy model") {
    auto lab = testsup::load_toy_lab(false);
    for (int layer = 1; layer <= 4; ++layer) {
        const SAEModel sae =
            load_sae(testsup::asset("toy/sae_layer" + std::to_string(layer) + ".safetensors"));
        sae.validate(lab.config.d_model);
        CHECK(sae.latent_count() == 128);
    }
}
