#include "steerkit/control.hpp"

#include <algorithm>

namespace steerkit {

void apply_steering(std::span<float> h, std::span<const float> v, float alpha) {
    if (h.size() != v.size()) {
        throw InvalidArgumentError("steering dimension mismatch: hidden " +
                                   std::to_string(h.size()) + " vs vector " +
                                   std::to_string(v.size()));
    }
    if (alpha == 0.0f) {
        return;
    }
    for (std::size_t i = 0; i < h.size(); ++i) {
        h[i] += alpha * v[i];
    }
}

ConstantSteeringHook::ConstantSteeringHook(const SteeringVectorSet &vectors, std::set<int> layers,
                                           float alpha, HookScope scope, InjectionPoint point)
    : scope_(scope), point_(point) {
    plan_.vectors = &vectors;
    plan_.alpha = alpha;
    plan_.controlled_layers = std::move(layers);
}

void ConstantSteeringHook::apply(int layer, std::span<float> hidden) const {
    if (!plan_.controlled_layers.count(layer)) {
        return;
    }
    apply_steering(hidden, plan_.vectors->per_layer.at(layer), plan_.alpha);
}

ConstantSteeringHook make_constant_hook(const SteeringVectorSet &vectors,
                                        const std::set<int> &layers, float alpha, HookScope scope,
                                        InjectionPoint point) {
    if (!layers.empty() && vectors.meta.model_layers < 1) {
        throw InvalidArgumentError("vector set does not record the model's layer count");
    }
    for (int l : layers) {
        if (l == vectors.meta.model_layers) {
            throw InvalidArgumentError("the final layer (" + std::to_string(l) +
                                       ") must not be controlled");
        }
        if (l < 1 || l > vectors.meta.model_layers) {
            throw InvalidArgumentError("controlled layer " + std::to_string(l) +
                                       " outside [1, " +
                                       std::to_string(vectors.meta.model_layers) + "]");
        }
        if (!vectors.per_layer.count(l)) {
            throw InvalidArgumentError("no steering vector stored for layer " + std::to_string(l));
        }
    }
    return ConstantSteeringHook(vectors, layers, alpha, scope, point);
}

std::set<int> parse_layer_range(const std::string &text) {
    const std::size_t dots = text.find("..");
    std::set<int> out;
    try {
        if (dots == std::string::npos) {
            out.insert(std::stoi(text));
            return out;
        }
        const int lo = std::stoi(text.substr(0, dots));
        const int hi = std::stoi(text.substr(dots + 2));
        if (lo > hi) {
            throw InvalidArgumentError("empty layer range '" + text + "'");
        }
        for (int l = lo; l <= hi; ++l) {
            out.insert(l);
        }
    } catch (const std::logic_error &) {
        throw InvalidArgumentError("cannot parse layer range '" + text + "'");
    }
    return out;
}

std::set<int> default_control_layers(int n_layers) {
    std::set<int> out;
    const int first = std::max(1, n_layers - n_layers / 3);
    for (int l = first; l < n_layers; ++l) {
        out.insert(l);
    }
    return out;
}

} // namespace steerkit
