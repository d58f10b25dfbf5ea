#ifndef MEGA_NETS_HPP
#define MEGA_NETS_HPP

#include <functional>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "mega/autodiff.hpp"
#include "mega/dataset.hpp"
#include "mega/optim.hpp"
#include "mega/rng.hpp"

namespace mega {

using NamedParams = std::vector<std::pair<std::string, Var>>;

inline std::vector<Var> values_of(const NamedParams& np) {
    std::vector<Var> out;
    out.reserve(np.size());
    for (const auto& [n, v] : np) out.push_back(v);
    return out;
}

inline void set_requires_grad(const NamedParams& np, bool rg) {
    for (const auto& [n, v] : np) v->requires_grad = rg;
}

inline std::uint64_t hash_params(const NamedParams& np) {
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (const auto& [n, v] : np) {
        h = fnv1a64(n.data(), n.size(), h);
        h = hash_tensor(v->value, h);
    }
    return h;
}

inline std::size_t count_params(const NamedParams& np) {
    std::size_t n = 0;
    for (const auto& [name, v] : np) n += v->value.data.size();
    return n;
}

// ------------------------------------------------------------------- layers

struct Conv2d {
    Var w, b;
    int stride = 1, pad = 1;

    Conv2d() = default;
    Conv2d(int cin, int cout, int k, int stride_, int pad_, Rng& rng) : stride(stride_), pad(pad_) {
        Tensor wt({cout, cin, k, k});
        double std = std::sqrt(2.0 / (cin * k * k));
        for (double& v : wt.data) v = rng.normal(0.0, std);
        w = make_param(std::move(wt));
        b = make_param(Tensor({cout}));
    }

    Var operator()(const Var& x) const { return conv2d(x, w, b, stride, pad); }
    void collect(const std::string& prefix, NamedParams& np) const {
        np.emplace_back(prefix + ".w", w);
        np.emplace_back(prefix + ".b", b);
    }
};

struct InstanceNorm2d {
    Var gamma, beta;

    InstanceNorm2d() = default;
    explicit InstanceNorm2d(int channels) {
        gamma = make_param(Tensor::full({channels}, 1.0));
        beta = make_param(Tensor({channels}));
    }

    Var operator()(const Var& x) const { return instance_norm(x, gamma, beta); }
    void collect(const std::string& prefix, NamedParams& np) const {
        np.emplace_back(prefix + ".gamma", gamma);
        np.emplace_back(prefix + ".beta", beta);
    }
};

struct LinearLayer {
    Var w, b;

    LinearLayer() = default;
    LinearLayer(int in, int out, Rng& rng) {
        Tensor wt({out, in});
        double std = std::sqrt(2.0 / in);
        for (double& v : wt.data) v = rng.normal(0.0, std);
        w = make_param(std::move(wt));
        b = make_param(Tensor({out}));
    }

    Var operator()(const Var& x) const { return linear(x, w, b); }
    void collect(const std::string& prefix, NamedParams& np) const {
        np.emplace_back(prefix + ".w", w);
        np.emplace_back(prefix + ".b", b);
    }
};

// ---------------------------------------------------------------- generator

// Image-to-image encoder/decoder: 3 stride-2 conv blocks, 2 residual blocks,
// 3 nearest-upsample conv blocks, sigmoid output. Instance norm only, so
// per-sample outputs are independent of batch composition.
struct Generator {
    int ch = 16;
    Conv2d d1, d2, d3, r1a, r1b, r2a, r2b, u1, u2, u3;
    InstanceNorm2d n1, n2, n3, nr1a, nr1b, nr2a, nr2b, nu1, nu2;

    Generator() = default;
    Generator(int base_channels, Rng& rng) : ch(base_channels) {
        d1 = Conv2d(3, ch, 3, 2, 1, rng);
        n1 = InstanceNorm2d(ch);
        d2 = Conv2d(ch, 2 * ch, 3, 2, 1, rng);
        n2 = InstanceNorm2d(2 * ch);
        d3 = Conv2d(2 * ch, 4 * ch, 3, 2, 1, rng);
        n3 = InstanceNorm2d(4 * ch);
        r1a = Conv2d(4 * ch, 4 * ch, 3, 1, 1, rng);
        nr1a = InstanceNorm2d(4 * ch);
        r1b = Conv2d(4 * ch, 4 * ch, 3, 1, 1, rng);
        nr1b = InstanceNorm2d(4 * ch);
        r2a = Conv2d(4 * ch, 4 * ch, 3, 1, 1, rng);
        nr2a = InstanceNorm2d(4 * ch);
        r2b = Conv2d(4 * ch, 4 * ch, 3, 1, 1, rng);
        nr2b = InstanceNorm2d(4 * ch);
        u1 = Conv2d(4 * ch, 2 * ch, 3, 1, 1, rng);
        nu1 = InstanceNorm2d(2 * ch);
        u2 = Conv2d(2 * ch, ch, 3, 1, 1, rng);
        nu2 = InstanceNorm2d(ch);
        u3 = Conv2d(ch, 3, 3, 1, 1, rng);
    }

    Var forward(const Var& x) const {
        require(x->value.shape.rank == 4 && x->value.shape.d[1] == 3, "generator: expected N x 3 x H x W input");
        require(x->value.shape.d[2] % 8 == 0 && x->value.shape.d[3] % 8 == 0,
                "generator: spatial dims must be divisible by 8");
        Var h = relu(n1(d1(x)));
        h = relu(n2(d2(h)));
        h = relu(n3(d3(h)));
        h = add(h, nr1b(r1b(relu(nr1a(r1a(h))))));
        h = add(h, nr2b(r2b(relu(nr2a(r2a(h))))));
        h = relu(nu1(u1(upsample_nearest2(h))));
        h = relu(nu2(u2(upsample_nearest2(h))));
        return sigmoid(u3(upsample_nearest2(h)));
    }

    NamedParams named_params() const {
        NamedParams np;
        d1.collect("g.d1", np); n1.collect("g.n1", np);
        d2.collect("g.d2", np); n2.collect("g.n2", np);
        d3.collect("g.d3", np); n3.collect("g.n3", np);
        r1a.collect("g.r1a", np); nr1a.collect("g.nr1a", np);
        r1b.collect("g.r1b", np); nr1b.collect("g.nr1b", np);
        r2a.collect("g.r2a", np); nr2a.collect("g.nr2a", np);
        r2b.collect("g.r2b", np); nr2b.collect("g.nr2b", np);
        u1.collect("g.u1", np); nu1.collect("g.nu1", np);
        u2.collect("g.u2", np); nu2.collect("g.nu2", np);
        u3.collect("g.u3", np);
        return np;
    }
};

// ------------------------------------------------------------ discriminator

// 4 conv layers, one real logit per image (spatial mean of the final map).
struct Discriminator {
    int ch = 16;
    Conv2d c1, c2, c3, c4;
    InstanceNorm2d n2, n3;

    Discriminator() = default;
    Discriminator(int base_channels, Rng& rng) : ch(base_channels) {
        c1 = Conv2d(3, ch, 3, 2, 1, rng);
        c2 = Conv2d(ch, 2 * ch, 3, 2, 1, rng);
        n2 = InstanceNorm2d(2 * ch);
        c3 = Conv2d(2 * ch, 4 * ch, 3, 2, 1, rng);
        n3 = InstanceNorm2d(4 * ch);
        c4 = Conv2d(4 * ch, 1, 3, 1, 1, rng);
    }

    // Returns N logits.
    Var forward(const Var& x) const {
        require(x->value.shape.rank == 4 && x->value.shape.d[1] == 3, "discriminator: expected N x 3 x H x W input");
        Var h = leaky_relu(c1(x));
        h = leaky_relu(n2(c2(h)));
        h = leaky_relu(n3(c3(h)));
        h = c4(h);
        return reshape(global_avg_pool(h), {x->value.shape.d[0]});
    }

    NamedParams named_params() const {
        NamedParams np;
        c1.collect("d.c1", np);
        c2.collect("d.c2", np); n2.collect("d.n2", np);
        c3.collect("d.c3", np); n3.collect("d.n3", np);
        c4.collect("d.c4", np);
        return np;
    }
};

// ------------------------------------------------------------------ embedder

// Victim/surrogate embedders. Arch "A": 3 stride-2 conv blocks. Arch "B":
// 4 stride-1 convs with average pooling, different widths. Both end in global
// average pooling and a linear head to `dim`. No normalization layers:
// per-channel statistics carry most of the identity signal here and instance
// norm would erase them.
struct ToyEmbedder {
    std::string arch = "A";
    int dim = 64;
    std::vector<Conv2d> convs;
    LinearLayer head;

    Var forward(const Var& x) const {
        require(x->value.shape.rank == 4 && x->value.shape.d[1] == 3, "embedder: expected N x 3 x H x W input");
        Var h = x;
        if (arch == "A") {
            for (std::size_t i = 0; i < convs.size(); ++i) h = relu(convs[i](h));
        } else {
            for (std::size_t i = 0; i < convs.size(); ++i) {
                h = relu(convs[i](h));
                if (i + 1 < convs.size()) h = avgpool2(h);
            }
        }
        return head(global_avg_pool(h));
    }

    NamedParams named_params() const {
        NamedParams np;
        for (std::size_t i = 0; i < convs.size(); ++i) convs[i].collect("f.c" + std::to_string(i), np);
        head.collect("f.head", np);
        return np;
    }
};

inline ToyEmbedder build_toy_embedder(const std::string& arch, int d, int seed) {
    require(d >= 4, "build_toy_embedder: d must be >= 4");
    require(arch == "A" || arch == "B", "build_toy_embedder: arch must be A or B");
    Rng rng(static_cast<std::uint64_t>(seed) ^ 0xe6546b64u);
    ToyEmbedder e;
    e.arch = arch;
    e.dim = d;
    if (arch == "A") {
        e.convs.emplace_back(3, 16, 3, 2, 1, rng);
        e.convs.emplace_back(16, 32, 3, 2, 1, rng);
        e.convs.emplace_back(32, 64, 3, 2, 1, rng);
        e.head = LinearLayer(64, d, rng);
    } else {
        e.convs.emplace_back(3, 12, 3, 1, 1, rng);
        e.convs.emplace_back(12, 24, 3, 1, 1, rng);
        e.convs.emplace_back(24, 48, 3, 1, 1, rng);
        e.convs.emplace_back(48, 48, 3, 1, 1, rng);
        e.head = LinearLayer(48, d, rng);
    }
    return e;
}

// Type-erased embedder handle passed to attack training and evaluation.
struct EmbedderHandle {
    std::string name;
    int dim = 0;
    std::function<Var(const Var&)> forward_graph;
    NamedParams params;

    Var operator()(const Var& x) const { return forward_graph(x); }

    // Plain inference on a batch tensor, chunked to bound graph size.
    Tensor embed(const Tensor& batch, int chunk = 64) const {
        require(batch.shape.rank == 4, "embed: expected N x C x H x W batch");
        int N = batch.shape.d[0];
        Tensor out({N, dim});
        std::size_t per = batch.data.size() / static_cast<std::size_t>(N);
        for (int start = 0; start < N; start += chunk) {
            int n = std::min(chunk, N - start);
            Tensor sub({n, batch.shape.d[1], batch.shape.d[2], batch.shape.d[3]});
            std::memcpy(sub.data.data(), batch.data.data() + static_cast<std::size_t>(start) * per,
                        static_cast<std::size_t>(n) * per * sizeof(double));
            Tensor emb = forward_graph(constant(std::move(sub)))->value;
            std::memcpy(out.row(start), emb.data.data(), emb.data.size() * sizeof(double));
        }
        return out;
    }

    std::uint64_t param_hash() const { return hash_params(params); }
};

inline EmbedderHandle make_handle(std::shared_ptr<ToyEmbedder> emb, bool frozen = true) {
    EmbedderHandle h;
    h.name = emb->arch;
    h.dim = emb->dim;
    h.params = emb->named_params();
    set_requires_grad(h.params, !frozen);
    h.forward_graph = [emb](const Var& x) { return emb->forward(x); };
    return h;
}

// -------------------------------------------------------- victim training

struct VictimTrainConfig {
    int epochs = 30;
    double lr = 1e-3;
    int P = 4, K = 4;
    int batches_per_epoch = 8;
    int seed = 0;
    double triplet_weight = 1.0;
    double triplet_margin = 0.3;
};

// Softmax identity classification plus a batch-hard triplet term, on the
// meta_train split. The classifier head is internal scaffolding and discarded
// afterwards; the triplet term is what shapes retrieval distances.
inline void train_toy_embedder(ToyEmbedder& emb, const Dataset& ds, const VictimTrainConfig& cfg) {
    require(ds.num_identities >= 2, "train_toy_embedder: labeled dataset required");
    Rng rng(static_cast<std::uint64_t>(cfg.seed) * 0x100000001b3ull + 7);
    LinearLayer classifier(emb.dim, ds.num_identities, rng);
    NamedParams np = emb.named_params();
    set_requires_grad(np, true);
    std::vector<Var> all = values_of(np);
    all.push_back(classifier.w);
    all.push_back(classifier.b);
    Adam opt(all, cfg.lr);
    int P = std::min(cfg.P, ds.num_identities);
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        for (int bi = 0; bi < cfg.batches_per_epoch; ++bi) {
            ImageBatch batch = sample_pk_batch(ds, P, cfg.K, rng);
            Var x = constant(batch.images);
            Var feats = emb.forward(x);
            Var loss = cross_entropy_logits(classifier(feats), batch.labels);
            if (cfg.triplet_weight > 0.0) {
                std::vector<TripletIndices> trips = mine_triplets_supervised(feats->value, batch.labels);
                if (!trips.empty()) {
                    std::vector<int> ia, ip, in_;
                    for (const TripletIndices& t : trips) {
                        ia.push_back(t.anchor);
                        ip.push_back(t.positive);
                        in_.push_back(t.negative);
                    }
                    Var dp = row_l2_distance(gather_rows(feats, ia), gather_rows(feats, ip));
                    Var dn = row_l2_distance(gather_rows(feats, ia), gather_rows(feats, in_));
                    Var trip = mean_all(relu(add_scalar(sub(dp, dn), cfg.triplet_margin)));
                    loss = add(loss, mul_scalar(trip, cfg.triplet_weight));
                }
            }
            require(loss->value.all_finite(), "train_toy_embedder: non-finite loss");
            opt.zero_grad();
            backward(loss);
            opt.step();
        }
    }
    set_requires_grad(np, false);
}

}  // namespace mega

#endif
