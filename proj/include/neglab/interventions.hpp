#pragma once

#include <map>
#include <optional>
#include <set>
#include <string>
#include <variant>
#include <vector>

#include "neglab/tensor.hpp"

namespace neglab {

struct TraceRecord;  // model.hpp

// Position selector for per-position directives. kLastPosition resolves to
// the final token of whatever prompt the plan is applied to.
inline constexpr int kLastPosition = -1;

enum class SinkPositions { All, LastOnly };

// Restrict attention at the selected query positions to keys {0, query}.
struct AttentionSink {
    std::set<int> layers;                       // 0-based
    std::optional<std::set<int>> heads;         // nullopt = all heads
    SinkPositions positions = SinkPositions::All;
};

// Mask attention from one query position to a half-open key span.
struct AttentionKnockout {
    std::set<int> layers;
    int query_pos = kLastPosition;
    int key_begin = 0;
    int key_end = 0;  // [key_begin, key_end)
};

// Replace the post-softmax attention pattern of whole layers with patterns
// recorded from a previous run on the same prompt shape.
struct FreezeAP {
    std::set<int> layers;
    std::map<int, Tensor> patterns;  // layer -> [H x T x T]
};

// Replace the attention-module output vector at one position.
struct PatchAO {
    std::set<int> layers;
    int position = kLastPosition;
    std::map<int, std::vector<float>> vectors;  // layer -> d_model
};

struct ZeroAO {
    std::set<int> layers;
    int position = kLastPosition;
};

struct ZeroMO {
    std::set<int> layers;
    int position = kLastPosition;
};

using Directive = std::variant<AttentionSink, AttentionKnockout, FreezeAP, PatchAO, ZeroAO, ZeroMO>;

class InterventionPlan {
  public:
    InterventionPlan() = default;

    // Deduplicates identical directives; rejects two directives of the same
    // kind addressing the same (layer, position) with different payloads.
    static InterventionPlan build(std::vector<Directive> directives);

    bool empty() const { return directives_.empty(); }
    const std::vector<Directive>& directives() const { return directives_; }

    // Throws if any directive addresses a layer/head/position outside the
    // given geometry.
    void validate(int n_layers, int n_heads, int seq_len) const;

    std::string to_json_text() const;
    static InterventionPlan from_json_text(const std::string& text);

  private:
    std::vector<Directive> directives_;
};

// Masks one pre-softmax score row in place per the sink rule: every key
// except {0, query_pos} drops to the mask sentinel.
void apply_sink_to_scores(std::span<float> score_row, size_t query_pos);

// Sink directives for layers from_layer..L (1-based), all heads, all positions.
InterventionPlan cumulative_sink_plan(int from_layer, int n_layers);

// Sink directives over layers [center - w/2, center + w/2] clipped to [1, L]
// (1-based in, 0-based stored).
InterventionPlan windowed_sink_plan(int center, int width, int n_layers,
                                    SinkPositions positions = SinkPositions::LastOnly);

// Path patch: PatchAO at the last position with the donor run's attention
// outputs at `target_layers`; FreezeAP everywhere else with the base run's
// own patterns. MLPs recompute freely.
InterventionPlan build_path_patch_plan(const TraceRecord& trace_donor,
                                       const TraceRecord& trace_base,
                                       const std::set<int>& target_layers);

}  // namespace neglab
