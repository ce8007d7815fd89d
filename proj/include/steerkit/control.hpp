#pragma once

#include <set>
#include <span>

#include "steerkit/engine.hpp"
#include "steerkit/reading.hpp"

namespace steerkit {

enum class HookScope { decode_only, all_positions };

// h <- h + alpha * v, in place. alpha == 0 leaves h untouched bit-for-bit.
void apply_steering(std::span<float> h, std::span<const float> v, float alpha);

struct SteeringPlan {
    std::set<int> controlled_layers; // never includes the model's final layer
    const SteeringVectorSet *vectors = nullptr; // not owned; must outlive the plan
    float alpha = 0.0f;
};

// Adds alpha * v^l to the residual-stream output of every controlled block.
// Immutable once built; shareable across streams.
class ConstantSteeringHook final : public LayerHook {
  public:
    ConstantSteeringHook(const SteeringVectorSet &vectors, std::set<int> layers, float alpha,
                         HookScope scope, InjectionPoint point = InjectionPoint::block_output);

    bool steer_prefill() const override { return scope_ == HookScope::all_positions; }
    InjectionPoint injection_point() const override { return point_; }
    void apply(int layer, std::span<float> hidden) const override;

    const SteeringPlan &plan() const { return plan_; }
    HookScope scope() const { return scope_; }

  private:
    SteeringPlan plan_;
    HookScope scope_;
    InjectionPoint point_;
};

// Validates the layer set against the vector set (layers present, final layer
// excluded) and builds the hook.
ConstantSteeringHook make_constant_hook(const SteeringVectorSet &vectors,
                                        const std::set<int> &layers, float alpha, HookScope scope,
                                        InjectionPoint point = InjectionPoint::block_output);

// "19..27" (inclusive) or a single "19".
std::set<int> parse_layer_range(const std::string &text);

// Default control set for a model: top third of layers, final layer excluded.
std::set<int> default_control_layers(int n_layers);

} // namespace steerkit
