#ifndef MEGA_OBJECTIVES_HPP
#define MEGA_OBJECTIVES_HPP

#include <map>
#include <string>
#include <vector>

#include "mega/autodiff.hpp"
#include "mega/dataset.hpp"
#include "mega/tensor.hpp"

namespace mega {

struct LossValue {
    double value = 0.0;
    std::map<std::string, double> components;
};

// Mis-ranking triplet hinge: penalizes the anchor being FAR from the negative
// and CLOSE to the positive (the roles are deliberately inverted relative to
// a standard triplet loss; minimizing it corrupts the ranking).
inline double adv_triplet_loss(const std::vector<double>& f_a, const std::vector<double>& f_n,
                               const std::vector<double>& f_p, double m) {
    require(f_a.size() == f_n.size() && f_a.size() == f_p.size(), "adv_triplet_loss: dimension mismatch");
    require(m >= 0.0, "adv_triplet_loss: margin must be >= 0");
    int d = static_cast<int>(f_a.size());
    double dn = euclidean(f_a.data(), f_n.data(), d);
    double dp = euclidean(f_a.data(), f_p.data(), d);
    return std::max(dn - dp + m, 0.0);
}

// Graph form over row-aligned triplet matrices (T x d each); mean over rows.
inline Var adv_triplet_loss_rows(const Var& f_a, const Var& f_n, const Var& f_p, double m) {
    require(f_a->value.shape == f_n->value.shape && f_a->value.shape == f_p->value.shape,
            "adv_triplet_loss: dimension mismatch");
    require(m >= 0.0, "adv_triplet_loss: margin must be >= 0");
    Var dn = row_l2_distance(f_a, f_n);
    Var dp = row_l2_distance(f_a, f_p);
    return mean_all(relu(add_scalar(sub(dn, dp), m)));
}

// Convenience: gathers mined triplet rows out of one embedding matrix.
inline Var adv_triplet_loss_graph(const Var& embeddings, const std::vector<TripletIndices>& triplets, double m) {
    require(!triplets.empty(), "adv_triplet_loss: no triplets");
    std::vector<int> ia, in_, ip;
    for (const auto& t : triplets) {
        ia.push_back(t.anchor);
        in_.push_back(t.negative);
        ip.push_back(t.positive);
    }
    return adv_triplet_loss_rows(gather_rows(embeddings, ia), gather_rows(embeddings, in_),
                                 gather_rows(embeddings, ip), m);
}

namespace detail {
inline double bce_with_logit(double z, bool target_real) {
    // -log sigma(z) for real targets, -log(1 - sigma(z)) for fake
    return target_real ? -log_sigmoid_scalar(z) : -log_sigmoid_scalar(-z);
}
}  // namespace detail

// Binary cross-entropy over real (target 1) and fake (target 0) logits, with
// per-entry target inversion where flip_mask is set (real entries first).
// Mean over all entries present; either side may be empty but not both.
// Minimizing this is the ascent step on E log D(x) + E log(1 - D(x_adv)).
inline double discriminator_loss(const std::vector<double>& logits_real, const std::vector<double>& logits_fake,
                                 const std::vector<std::uint8_t>& flip_mask = {}) {
    std::size_t n = logits_real.size() + logits_fake.size();
    require(n > 0, "discriminator_loss: empty batches");
    require(flip_mask.empty() || flip_mask.size() == n, "discriminator_loss: flip mask size mismatch");
    double sum = 0.0;
    for (std::size_t i = 0; i < logits_real.size(); ++i) {
        bool target_real = flip_mask.empty() || !flip_mask[i];
        sum += detail::bce_with_logit(logits_real[i], target_real);
    }
    for (std::size_t i = 0; i < logits_fake.size(); ++i) {
        bool flipped = !flip_mask.empty() && flip_mask[logits_real.size() + i];
        sum += detail::bce_with_logit(logits_fake[i], flipped);
    }
    return sum / static_cast<double>(n);
}

inline Var discriminator_loss_graph(const Var& logits_real, const Var& logits_fake,
                                    const std::vector<std::uint8_t>& flip_mask = {}) {
    int nr = logits_real ? logits_real->value.numel() : 0;
    int nf = logits_fake ? logits_fake->value.numel() : 0;
    require(nr + nf > 0, "discriminator_loss: empty batches");
    require(flip_mask.empty() || static_cast<int>(flip_mask.size()) == nr + nf,
            "discriminator_loss: flip mask size mismatch");
    // -log sigma(s*z) with s = +1 for a real target, -1 for fake
    auto signs = [&](int count, std::size_t base, bool real_side) {
        Tensor s({count});
        for (int i = 0; i < count; ++i) {
            bool flipped = !flip_mask.empty() && flip_mask[base + static_cast<std::size_t>(i)];
            bool target_real = real_side != flipped;
            s.data[static_cast<std::size_t>(i)] = target_real ? 1.0 : -1.0;
        }
        return s;
    };
    Var total;
    if (nr > 0) total = sum_all(log_sigmoid(mul(logits_real, constant(signs(nr, 0, true)))));
    if (nf > 0) {
        Var fake_sum = sum_all(log_sigmoid(mul(logits_fake, constant(signs(nf, static_cast<std::size_t>(nr), false)))));
        total = total ? add(total, fake_sum) : fake_sum;
    }
    return mul_scalar(total, -1.0 / (nr + nf));
}

// Saturating generator loss as written: mean log(1 - sigma(logit)).
inline double generator_gan_loss(const std::vector<double>& logits_fake) {
    require(!logits_fake.empty(), "generator_gan_loss: empty batch");
    double sum = 0.0;
    for (double z : logits_fake) sum += log_sigmoid_scalar(-z);
    return sum / static_cast<double>(logits_fake.size());
}

inline Var generator_gan_loss_graph(const Var& logits_fake) {
    require(logits_fake->value.numel() > 0, "generator_gan_loss: empty batch");
    return mean_all(log_sigmoid(neg(logits_fake)));
}

// Non-saturating alternative (-mean log sigma(logit)); off by default, kept
// behind a config flag for training convenience comparisons.
inline Var generator_gan_loss_nonsaturating_graph(const Var& logits_fake) {
    require(logits_fake->value.numel() > 0, "generator_gan_loss: empty batch");
    return neg(mean_all(log_sigmoid(logits_fake)));
}

inline LossValue combined_generator_objective(double gan, double trip, double lambda) {
    require(lambda >= 0.0, "combined_generator_objective: lambda must be >= 0");
    LossValue lv;
    lv.value = gan + lambda * trip;
    lv.components["gan"] = gan;
    lv.components["trip"] = trip;
    lv.components["lambda"] = lambda;
    return lv;
}

}  // namespace mega

#endif
