#ifndef MEGA_ATTACK_CORE_HPP
#define MEGA_ATTACK_CORE_HPP

#include "mega/dataset.hpp"
#include "mega/nets.hpp"
#include "mega/saliency_mask.hpp"

namespace mega {

struct AttackBudget {
    double eps_255 = 16.0;   // budget on the 0-255 pixel scale
    double epsilon = 16.0 / 255.0;

    AttackBudget() = default;
    explicit AttackBudget(double e255) : eps_255(e255), epsilon(e255 / 255.0) {
        require(e255 > 0.0 && e255 <= 255.0, "AttackBudget: eps must be in (0, 255]");
    }
};

// Projection into the l-inf ball of radius eps around x, intersected with the
// valid pixel range: clamp(raw, max(x-eps,0), min(x+eps,1)).
inline Tensor project_linf(const Tensor& raw, const Tensor& x, double eps) {
    require(raw.shape == x.shape, "project_linf: shape mismatch");
    require(eps > 0.0, "project_linf: eps must be positive");
    Tensor out = raw;
    for (std::size_t i = 0; i < out.data.size(); ++i) {
        double lo = std::max(x.data[i] - eps, 0.0);
        double hi = std::min(x.data[i] + eps, 1.0);
        out.data[i] = std::min(std::max(out.data[i], lo), hi);
    }
    return out;
}

// Graph form with pass-through gradients at the clamp boundary (hard-zero
// gradients there stall generator training).
inline Var project_linf_graph(const Var& raw, const Tensor& x, double eps) {
    require(raw->value.shape == x.shape, "project_linf: shape mismatch");
    require(eps > 0.0, "project_linf: eps must be positive");
    Tensor lo(x.shape), hi(x.shape);
    for (std::size_t i = 0; i < x.data.size(); ++i) {
        lo.data[i] = std::max(x.data[i] - eps, 0.0);
        hi.data[i] = std::min(x.data[i] + eps, 1.0);
    }
    return clamp_pass(raw, lo, hi);
}

// Budget assertion used as an internal bug guard on every adversarial image.
// The checks recompute the projection bounds exactly as project_linf does, so
// a correctly projected tensor passes bit-exact.
inline void assert_within_budget(const Tensor& x_adv, const Tensor& x, double eps, const std::string& where) {
    require(x_adv.shape == x.shape, "budget check: shape mismatch at " + where);
    for (std::size_t i = 0; i < x.data.size(); ++i) {
        double lo = std::max(x.data[i] - eps, 0.0);
        double hi = std::min(x.data[i] + eps, 1.0);
        double v = x_adv.data[i];
        if (!(v >= lo && v <= hi && v >= 0.0 && v <= 1.0))
            fatal("epsilon budget violated at " + where + ": value " + std::to_string(v) + " outside [" +
                  std::to_string(lo) + ", " + std::to_string(hi) + "]");
    }
}

// Looser variant for perturbations REUSED on a different base image: the
// original projection bounds were computed from the donor image, so one
// rounding of that arithmetic can exceed eps by an ulp here.
inline void assert_within_budget_reused(const Tensor& x_adv, const Tensor& x, double eps, const std::string& where) {
    require(x_adv.shape == x.shape, "budget check: shape mismatch at " + where);
    double slack = eps * 1e-12 + 1e-15;
    for (std::size_t i = 0; i < x.data.size(); ++i)
        if (!(std::abs(x_adv.data[i] - x.data[i]) <= eps + slack))
            fatal("epsilon budget violated at " + where + ": |delta| = " +
                  std::to_string(std::abs(x_adv.data[i] - x.data[i])) + " > " + std::to_string(eps));
}

// delta = x - x_adv; the adversarial image for a new anchor is x_new - delta.
inline Tensor extract_perturbation(const Tensor& x, const Tensor& x_adv) {
    require(x.shape == x_adv.shape, "extract_perturbation: shape mismatch");
    Tensor d = x;
    for (std::size_t i = 0; i < d.data.size(); ++i) d.data[i] -= x_adv.data[i];
    return d;
}

// Inference-time attack: x_adv = project(G(x'), x, eps) with x' either the
// raw input or its masked version. Masks need at least 2 images per batch to
// mine their negatives.
inline Tensor attack(const Generator& g, const Tensor& x_batch, const AttackBudget& budget, bool use_mask = false,
                     const EmbedderHandle* f_surrogate = nullptr, double margin = 1.0, int mask_seed = 0) {
    require(x_batch.shape.rank == 4, "attack: expected N x C x H x W batch");
    Tensor input = x_batch;
    if (use_mask) {
        require(f_surrogate != nullptr, "attack: masking requires a surrogate embedder");
        ImageBatch b;
        b.images = x_batch;
        b.labels.assign(static_cast<std::size_t>(x_batch.shape.d[0]), kAbsent);
        Rng rng(static_cast<std::uint64_t>(mask_seed) ^ 0xa5a5a5a5ull);
        std::vector<MaskTriplet> trips = mask_triplets_for_batch(b, *f_surrogate, rng);
        std::vector<Mask> masks = compute_masks_batch(*f_surrogate, b, trips, margin);
        input = apply_masks_batch(x_batch, masks);
    }
    Tensor out = project_linf(g.forward(constant(input))->value, x_batch, budget.epsilon);
    assert_within_budget(out, x_batch, budget.epsilon, "attack output");
    return out;
}

}  // namespace mega

#endif
