#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>

#include "doctest.h"
#include "neglab/errors.hpp"
#include "neglab/interventions.hpp"
#include "neglab/model.hpp"
#include "support.hpp"

using namespace neglab;

namespace {

InterventionPlan full_sink(int n_layers) { return cumulative_sink_plan(1, n_layers); }

}  // namespace

TEST_CASE("apply_sink_to_scores masks everything but {0, query}") {
    std::vector<float> row = {1.0f, 1.0f, 1.0f, 1.0f};
    apply_sink_to_scores(row, 3);
    CHECK(row[0] == 1.0f);
    CHECK(row[3] == 1.0f);
    CHECK(row[1] <= ops::kMaskedScore);
    CHECK(row[2] <= ops::kMaskedScore);

    // query at position 0 collapses to weight 1 on position 0
    std::vector<float> first = {0.5f};
    apply_sink_to_scores(first, 0);
    ops::softmax_row(std::span<float>(first.data(), 1), 1);
    CHECK(first[0] == 1.0f);
}

TEST_CASE("sunk rows renormalize over {0, query}") {
    const auto cfg = testsup::tiny_config(2, 16, 2, 30);
    const Model model = testsup::tiny_model(cfg, 5);
    const TraceRecord trace = model.forward({1, 2, 3, 4, 5}, TraceRequest::everything(cfg.n_layers),
                                            full_sink(cfg.n_layers));
    for (const auto& [layer, ap] : trace.attn_pattern) {
        const size_t t = 5;
        for (size_t h = 0; h < 2; ++h) {
            for (size_t q = 0; q < t; ++q) {
                for (size_t k = 0; k < t; ++k) {
                    const float w = ap.data[(h * t + q) * t + k];
                    if (k != 0 && k != q) CHECK(w == 0.0f);
                }
                const float mass = ap.data[(h * t + q) * t + 0] + (q == 0 ? 0.0f : ap.data[(h * t + q) * t + q]);
                CHECK(mass == doctest::Approx(1.0f).epsilon(1e-6));
            }
        }
    }
}

TEST_CASE("uniform scores with sink at query 3 give weights [0.5, 0, 0, 0.5]") {
    std::vector<float> row = {2.0f, 2.0f, 2.0f, 2.0f};
    apply_sink_to_scores(row, 3);
    ops::softmax_row(std::span<float>(row.data(), 4), 4);
    CHECK(row[0] == doctest::Approx(0.5f));
    CHECK(row[1] == 0.0f);
    CHECK(row[2] == 0.0f);
    CHECK(row[3] == doctest::Approx(0.5f));
}

TEST_CASE("cumulative_sink_plan bounds") {
    const InterventionPlan one = cumulative_sink_plan(4, 4);
    REQUIRE(one.directives().size() == 1);
    CHECK(std::get<AttentionSink>(one.directives()[0]).layers == std::set<int>{3});

    const InterventionPlan all = cumulative_sink_plan(1, 4);
    CHECK(std::get<AttentionSink>(all.directives()[0]).layers == std::set<int>{0, 1, 2, 3});

    CHECK_THROWS_AS(cumulative_sink_plan(5, 4), ConfigError);
    CHECK_THROWS_AS(cumulative_sink_plan(0, 4), ConfigError);
}

TEST_CASE("windowed_sink_plan clipping") {
    auto layers_of = [](const InterventionPlan& p) {
        return std::get<AttentionSink>(p.directives()[0]).layers;
    };
    CHECK(layers_of(windowed_sink_plan(14, 3, 32)) == std::set<int>{12, 13, 14});  // 13..15 1-based
    CHECK(layers_of(windowed_sink_plan(1, 3, 32)) == std::set<int>{0, 1});
    CHECK(layers_of(windowed_sink_plan(14, 1, 32)) == std::set<int>{13});
    CHECK(layers_of(windowed_sink_plan(32, 3, 32)) == std::set<int>{30, 31});
    CHECK_THROWS_AS(windowed_sink_plan(5, 0, 32), ConfigError);
    const auto& d = std::get<AttentionSink>(windowed_sink_plan(4, 3, 8).directives()[0]);
    CHECK(d.positions == SinkPositions::LastOnly);
}

TEST_CASE("full-sink locality: middle-token perturbations cannot reach the readout") {
    const auto cfg = testsup::tiny_config(3, 24, 3, 50);
    const Model model = testsup::tiny_model(cfg, 12);
    const InterventionPlan plan = full_sink(cfg.n_layers);
    Rng rng(77);
    for (int trial = 0; trial < 50; ++trial) {
        auto tokens = testsup::random_prompt(rng, cfg.vocab_size, 3, 10);
        const TraceRecord base = model.forward(tokens, TraceRequest::none(), plan);
        // perturb one strictly-interior token
        const size_t victim = 1 + rng.below(static_cast<uint32_t>(tokens.size() - 2));
        int replacement = static_cast<int>(rng.below(static_cast<uint32_t>(cfg.vocab_size)));
        if (replacement == tokens[victim]) replacement = (replacement + 1) % cfg.vocab_size;
        tokens[victim] = replacement;
        const TraceRecord perturbed = model.forward(tokens, TraceRequest::none(), plan);
        CHECK(testsup::max_abs_diff(base.readout_logits(), perturbed.readout_logits()) < 1e-6);
    }
}

TEST_CASE("sink idempotence: the same directive twice deduplicates") {
    AttentionSink sink;
    sink.layers = {0, 1};
    const InterventionPlan once = InterventionPlan::build({sink});
    const InterventionPlan twice = InterventionPlan::build({sink, sink});
    CHECK(once.directives().size() == twice.directives().size());

    const auto cfg = testsup::tiny_config();
    const Model model = testsup::tiny_model(cfg);
    const TraceRecord a = model.forward({1, 2, 3}, TraceRequest::none(), once);
    const TraceRecord b = model.forward({1, 2, 3}, TraceRequest::none(), twice);
    CHECK(a.logits.data == b.logits.data);
}

TEST_CASE("conflicting directives rejected at build time") {
    AttentionSink all_heads;
    all_heads.layers = {1};
    AttentionSink one_head;
    one_head.layers = {1};
    one_head.heads = std::set<int>{0};
    CHECK_THROWS_AS(InterventionPlan::build({all_heads, one_head}), ConfigError);

    PatchAO p1;
    p1.layers = {2};
    p1.vectors[2] = {1.0f};
    PatchAO p2;
    p2.layers = {2};
    p2.vectors[2] = {2.0f};
    CHECK_THROWS_AS(InterventionPlan::build({p1, p2}), ConfigError);
}

TEST_CASE("knockout of an empty span is the identity") {
    const auto cfg = testsup::tiny_config();
    const Model model = testsup::tiny_model(cfg);
    AttentionKnockout ko;
    ko.layers = {0, 1};
    ko.query_pos = kLastPosition;
    ko.key_begin = 2;
    ko.key_end = 2;
    const TraceRecord plain = model.forward({1, 2, 3, 4});
    const TraceRecord knocked =
        model.forward({1, 2, 3, 4}, TraceRequest::none(), InterventionPlan::build({ko}));
    CHECK(plain.logits.data == knocked.logits.data);
}

TEST_CASE("knocking out everything except {0, query} equals the sink") {
    const auto cfg = testsup::tiny_config(2, 16, 2, 30);
    const Model model = testsup::tiny_model(cfg, 5);
    const std::vector<int> tokens = {1, 2, 3, 4, 5};
    AttentionKnockout ko;  // block keys 1..3 for the last query
    ko.layers = {0, 1};
    ko.query_pos = 4;
    ko.key_begin = 1;
    ko.key_end = 4;
    AttentionSink sink;
    sink.layers = {0, 1};
    sink.positions = SinkPositions::LastOnly;
    const TraceRecord a =
        model.forward(tokens, TraceRequest::none(), InterventionPlan::build({ko}));
    const TraceRecord b =
        model.forward(tokens, TraceRequest::none(), InterventionPlan::build({sink}));
    CHECK(a.logits.data == b.logits.data);
}

TEST_CASE("path patch no-op: identical traces leave logits unchanged") {
    auto lab = testsup::load_toy_lab(false);
    const std::vector<int> tokens =
        encode_prompt(*lab.tokenizer, lab.config, "An animal that is not an amphibian is a");
    TraceRequest req = TraceRequest::everything(lab.config.n_layers);
    const TraceRecord trace = lab.model->forward(tokens, req);

    SUBCASE("patch from the same run") {
        const InterventionPlan plan = build_path_patch_plan(trace, trace, {1, 2});
        const TraceRecord patched = lab.model->forward(tokens, TraceRequest::none(), plan);
        CHECK(testsup::max_abs_diff(trace.readout_logits(), patched.readout_logits()) < 1e-4);
    }
    SUBCASE("empty target set freezes patterns to their own values") {
        const InterventionPlan plan = build_path_patch_plan(trace, trace, {});
        const TraceRecord patched = lab.model->forward(tokens, TraceRequest::none(), plan);
        CHECK(testsup::max_abs_diff(trace.readout_logits(), patched.readout_logits()) < 1e-4);
    }
}

TEST_CASE("path patch against a spliced-forward reference") {
    // reference: recompute the forward layer by layer, replacing AO at the
    // last position with donor values at target layers and freezing patterns
    // elsewhere; uses only traces plus the plain model on modified inputs
    const auto cfg = testsup::tiny_config(4, 16, 2, 30);
    const Model model = testsup::tiny_model(cfg, 9);
    const std::vector<int> base_tokens = {5, 6, 7, 8};
    const std::vector<int> donor_tokens = {9, 10, 11, 12};
    const std::set<int> targets = {1, 2};

    TraceRequest req = TraceRequest::everything(cfg.n_layers);
    const TraceRecord base = model.forward(base_tokens, req);
    const TraceRecord donor = model.forward(donor_tokens, req);

    const InterventionPlan plan = build_path_patch_plan(donor, base, targets);
    const TraceRecord patched = model.forward(base_tokens, req, plan);

    // reference residual accumulation from recorded quantities: frozen
    // patterns mean non-target layers contribute their recorded AO at the
    // last position only if value vectors did not change upstream; target
    // layers contribute donor AO. With all non-target patterns frozen and
    // patches applying only at the last position, positions < last are
    // untouched, so recorded AO values at those positions stay valid and the
    // last-position residual is E + sum of (per-layer contributions).
    const int last = static_cast<int>(base_tokens.size()) - 1;
    const size_t d = static_cast<size_t>(cfg.d_model);

    // positions before last must be bit-identical to the clean run
    for (int pos = 0; pos + 1 < static_cast<int>(base_tokens.size()); ++pos) {
        CHECK(testsup::max_abs_diff(
                  std::span<const float>(patched.final_hidden.row(pos).data(), d),
                  std::span<const float>(base.final_hidden.row(pos).data(), d)) == 0.0);
    }
    // target layers carry donor AO at the readout position
    for (int l : targets) {
        CHECK(patched.ao(l, last) == donor.ao(l, last));
    }
    // non-target layers keep their frozen attention patterns
    for (int l = 0; l < cfg.n_layers; ++l) {
        if (targets.count(l)) continue;
        CHECK(patched.attn_pattern.at(l).data == base.attn_pattern.at(l).data);
    }
    // the spliced residual accounts for the patched logits: rebuild h_{L+1}
    // from the patched trace and compare
    std::vector<double> rebuilt(d, 0.0);
    const auto& e = patched.emb(last);
    for (size_t i = 0; i < d; ++i) rebuilt[i] = e[i];
    for (int l = 0; l < cfg.n_layers; ++l) {
        const auto& ao = patched.ao(l, last);
        const auto& mo = patched.mo(l, last);
        for (size_t i = 0; i < d; ++i) rebuilt[i] += ao[i] + mo[i];
    }
    for (size_t i = 0; i < d; ++i) {
        CHECK(std::fabs(rebuilt[i] - patched.final_hidden.at(static_cast<size_t>(last), i)) <
              1e-4);
    }
}

TEST_CASE("zero-ablation directives zero the recorded contribution") {
    const auto cfg = testsup::tiny_config();
    const Model model = testsup::tiny_model(cfg);
    ZeroAO zao;
    zao.layers = {1};
    zao.position = kLastPosition;
    ZeroMO zmo;
    zmo.layers = {0};
    zmo.position = 0;
    const InterventionPlan plan = InterventionPlan::build({zao, zmo});
    const TraceRecord trace =
        model.forward({1, 2, 3}, TraceRequest::everything(cfg.n_layers), plan);
    for (float v : trace.ao(1, 2)) CHECK(v == 0.0f);
    for (float v : trace.mo(0, 0)) CHECK(v == 0.0f);
}

TEST_CASE("plans serialize to JSON and back") {
    AttentionSink sink;
    sink.layers = {0, 2};
    sink.heads = std::set<int>{1};
    sink.positions = SinkPositions::LastOnly;
    AttentionKnockout ko;
    ko.layers = {1};
    ko.query_pos = 3;
    ko.key_begin = 1;
    ko.key_end = 2;
    PatchAO patch;
    patch.layers = {3};
    patch.position = kLastPosition;
    patch.vectors[3] = {0.25f, -1.5f};
    FreezeAP freeze;
    freeze.layers = {2};
    freeze.patterns[2] = Tensor({1, 2, 2}, {1.0f, 0.0f, 0.5f, 0.5f});
    ZeroMO zmo;
    zmo.layers = {0};
    zmo.position = 1;

    const InterventionPlan plan = InterventionPlan::build({sink, ko, patch, freeze, zmo});
    const std::string text = plan.to_json_text();
    const InterventionPlan back = InterventionPlan::from_json_text(text);
    CHECK(back.to_json_text() == text);  // canonical round trip
    REQUIRE(back.directives().size() == plan.directives().size());
    const auto& sink_back = std::get<AttentionSink>(back.directives()[0]);
    CHECK(sink_back.layers == sink.layers);
    CHECK(sink_back.heads == sink.heads);
    CHECK(sink_back.positions == SinkPositions::LastOnly);
    const auto& patch_back = std::get<PatchAO>(back.directives()[2]);
    CHECK(patch_back.vectors.at(3) == patch.vectors.at(3));
    const auto& freeze_back = std::get<FreezeAP>(back.directives()[3]);
    CHECK(freeze_back.patterns.at(2).data == freeze.patterns.at(2).data);
}

TEST_CASE("per-head sink only affects the masked heads") {
    const auto cfg = testsup::tiny_config(1, 16, 2, 30);
    const Model model = testsup::tiny_model(cfg, 4);
    AttentionSink sink;
    sink.layers = {0};
    sink.heads = std::set<int>{0};
    const TraceRecord trace = model.forward({1, 2, 3, 4}, TraceRequest::everything(1),
                                            InterventionPlan::build({sink}));
    const Tensor& ap = trace.attn_pattern.at(0);
    const size_t t = 4;
    // head 0 sunk at every query position
    for (size_t q = 1; q < t; ++q) {
        for (size_t k = 1; k < t; ++k) {
            if (k != q) CHECK(ap.data[(0 * t + q) * t + k] == 0.0f);
        }
    }
    // head 1 keeps some mass off {0, q} somewhere
    float off_mass = 0.0f;
    for (size_t q = 1; q < t; ++q) {
        for (size_t k = 1; k < q; ++k) off_mass += ap.data[(1 * t + q) * t + k];
    }
    CHECK(off_mass > 0.0f);
}
