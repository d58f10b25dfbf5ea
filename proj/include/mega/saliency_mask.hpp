#ifndef MEGA_SALIENCY_MASK_HPP
#define MEGA_SALIENCY_MASK_HPP

#include <string>
#include <vector>

#include "mega/dataset.hpp"
#include "mega/nets.hpp"
#include "mega/objectives.hpp"

namespace mega {

// Saliency mask M = sigma(|grad_x L|): pixels whose input-gradient under the
// surrogate is large get suppressed in the generator input (x (1-M)), which
// reduces overfitting the perturbation to surrogate-specific saliency.
struct Mask {
    Tensor M;  // image-shaped, every element in [0.5, 1)
    std::string source_model;
    int anchor_index = -1;
};

struct MaskTriplet {
    int negative = -1;  // batch position of the farthest other sample
    Tensor positive;    // augmentation of the anchor
};

// Triplet used for mask gradients: positive = augment(anchor); negative =
// batch member (other than the anchor) with MAXIMUM embedding distance.
// This is deliberately the opposite mining rule from the unsupervised
// training negative, which picks the closest.
inline MaskTriplet mask_triplet_for(const ImageBatch& batch, int anchor_in_batch, const EmbedderHandle& f, Rng& rng) {
    int N = batch.size();
    require(N >= 2, "mask_triplet_for: batch must hold at least 2 samples");
    require(anchor_in_batch >= 0 && anchor_in_batch < N, "mask_triplet_for: bad anchor index");
    Tensor emb = f.embed(batch.images);
    int far = -1;
    double far_d = -1.0;
    for (int j = 0; j < N; ++j) {
        if (j == anchor_in_batch) continue;
        double d = euclidean(emb.row(anchor_in_batch), emb.row(j), f.dim);
        if (d > far_d) {
            far_d = d;
            far = j;
        }
    }
    MaskTriplet t;
    t.negative = far;
    int C = batch.images.shape.d[1], H = batch.images.shape.d[2], W = batch.images.shape.d[3];
    Tensor anchor({C, H, W});
    std::memcpy(anchor.data.data(), &batch.images.data[batch.images.idx4(anchor_in_batch, 0, 0, 0)],
                anchor.data.size() * sizeof(double));
    t.positive = augment(anchor, rng);
    return t;
}

// Same mining rule for every batch member with a single embedding pass.
inline std::vector<MaskTriplet> mask_triplets_for_batch(const ImageBatch& batch, const EmbedderHandle& f, Rng& rng) {
    int N = batch.size();
    require(N >= 2, "mask_triplets_for_batch: batch must hold at least 2 samples");
    Tensor emb = f.embed(batch.images);
    int C = batch.images.shape.d[1], H = batch.images.shape.d[2], W = batch.images.shape.d[3];
    std::size_t per = static_cast<std::size_t>(C) * H * W;
    std::vector<MaskTriplet> out;
    for (int a = 0; a < N; ++a) {
        MaskTriplet t;
        double far_d = -1.0;
        for (int j = 0; j < N; ++j) {
            if (j == a) continue;
            double d = euclidean(emb.row(a), emb.row(j), f.dim);
            if (d > far_d) {
                far_d = d;
                t.negative = j;
            }
        }
        Tensor anchor({C, H, W});
        std::memcpy(anchor.data.data(), batch.images.data.data() + static_cast<std::size_t>(a) * per,
                    per * sizeof(double));
        t.positive = augment(anchor, rng);
        out.push_back(std::move(t));
    }
    return out;
}

namespace detail {
inline Tensor image_as_batch1(const Tensor& chw) {
    require(chw.shape.rank == 3, "expected C x H x W image");
    Tensor b = chw;
    b.shape = Shape{1, chw.shape.d[0], chw.shape.d[1], chw.shape.d[2]};
    return b;
}

inline Tensor sigmoid_abs(const Tensor& g) {
    Tensor m = g;
    for (double& v : m.data) v = sigmoid_scalar(std::abs(v));
    return m;
}
}  // namespace detail

// Gradient of the mis-ranking triplet loss on REAL (clean) samples, taken
// with respect to the anchor image only; M = sigma(|g|) elementwise.
inline Mask compute_mask(const EmbedderHandle& f, const Tensor& x, const Tensor& x_n, const Tensor& x_p, double m) {
    require(x.shape == x_n.shape && x.shape == x_p.shape, "compute_mask: image shape mismatch");
    Var anchor = make_input(detail::image_as_batch1(x), true);
    Var f_a = f(anchor);
    Var f_n = constant(f.embed(detail::image_as_batch1(x_n)));
    Var f_p = constant(f.embed(detail::image_as_batch1(x_p)));
    Var loss = adv_triplet_loss_rows(f_a, f_n, f_p, m);
    backward(loss);
    Mask out;
    out.M = detail::sigmoid_abs(anchor->grad);
    out.M.shape = x.shape;
    out.source_model = f.name;
    return out;
}

// All per-sample masks of a batch in one backward pass. Each loss row only
// touches its own anchor (the embedders are per-sample pure), so summing the
// rows yields exactly the per-sample gradients.
inline std::vector<Mask> compute_masks_batch(const EmbedderHandle& f, const ImageBatch& batch,
                                             const std::vector<MaskTriplet>& triplets, double m) {
    int N = batch.size();
    require(static_cast<int>(triplets.size()) == N, "compute_masks_batch: triplet count mismatch");
    int C = batch.images.shape.d[1], H = batch.images.shape.d[2], W = batch.images.shape.d[3];

    Var anchors = make_input(batch.images, true);
    Tensor positives({N, C, H, W});
    std::vector<int> neg_idx;
    std::size_t per = static_cast<std::size_t>(C) * H * W;
    for (int i = 0; i < N; ++i) {
        require(triplets[static_cast<std::size_t>(i)].negative != i, "compute_masks_batch: negative equals anchor");
        std::memcpy(positives.data.data() + static_cast<std::size_t>(i) * per,
                    triplets[static_cast<std::size_t>(i)].positive.data.data(), per * sizeof(double));
        neg_idx.push_back(triplets[static_cast<std::size_t>(i)].negative);
    }
    Var f_a = f(anchors);
    Tensor emb_all = f.embed(batch.images);
    Tensor f_n({N, f.dim});
    for (int i = 0; i < N; ++i)
        std::memcpy(f_n.row(i), emb_all.row(neg_idx[static_cast<std::size_t>(i)]),
                    static_cast<std::size_t>(f.dim) * sizeof(double));
    Var f_p = constant(f.embed(positives));

    Var dn = row_l2_distance(f_a, constant(f_n));
    Var dp = row_l2_distance(f_a, f_p);
    backward(sum_all(relu(add_scalar(sub(dn, dp), m))));

    std::vector<Mask> masks;
    for (int i = 0; i < N; ++i) {
        Mask mk;
        mk.M = Tensor({C, H, W});
        std::memcpy(mk.M.data.data(), anchors->grad.data.data() + static_cast<std::size_t>(i) * per,
                    per * sizeof(double));
        mk.M = detail::sigmoid_abs(mk.M);
        mk.source_model = f.name;
        mk.anchor_index = batch.sample_indices.empty() ? i : batch.sample_indices[static_cast<std::size_t>(i)];
        masks.push_back(std::move(mk));
    }
    return masks;
}

inline Tensor apply_mask(const Tensor& x, const Mask& mask) {
    require(x.shape == mask.M.shape, "apply_mask: shape mismatch");
    Tensor out = x;
    for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] *= 1.0 - mask.M.data[i];
    return out;
}

// Batch tensor of masked inputs x (1-M).
inline Tensor apply_masks_batch(const Tensor& images, const std::vector<Mask>& masks) {
    require(images.shape.rank == 4 && static_cast<int>(masks.size()) == images.shape.d[0],
            "apply_masks_batch: mask count mismatch");
    Tensor out = images;
    std::size_t per = out.data.size() / masks.size();
    for (std::size_t i = 0; i < masks.size(); ++i) {
        require(masks[i].M.data.size() == per, "apply_masks_batch: mask shape mismatch");
        for (std::size_t j = 0; j < per; ++j) out.data[i * per + j] *= 1.0 - masks[i].M.data[j];
    }
    return out;
}

// Channel-averaged (1-M) for visualization dumps.
inline Tensor mask_to_gray(const Mask& mask) {
    int C = mask.M.shape.d[0], H = mask.M.shape.d[1], W = mask.M.shape.d[2];
    Tensor g({H, W});
    for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x) {
            double s = 0;
            for (int c = 0; c < C; ++c) s += 1.0 - mask.M.at3(c, y, x);
            g.at2(y, x) = s / C;
        }
    return g;
}

}  // namespace mega

#endif
