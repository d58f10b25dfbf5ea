#ifndef MEGA_META_TRAINER_HPP
#define MEGA_META_TRAINER_HPP

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "mega/attack_core.hpp"
#include "mega/checkpoint.hpp"
#include "mega/dataset.hpp"
#include "mega/nets.hpp"
#include "mega/objectives.hpp"
#include "mega/optim.hpp"
#include "mega/saliency_mask.hpp"

namespace mega {

// ------------------------------------------------------------ configuration

struct TrainConfig {
    double lr = 1e-5;
    double beta1 = 0.5;
    double beta2 = 0.999;
    int epochs = 40;
    double m = 1.0;
    double lambda = 0.01;
    double eps_255 = 16.0;
    double flip_prob = 0.05;
    int P = 4;
    int K = 4;
    std::string mode = "supervised";
    bool use_meta = true;
    bool use_mask = true;
    int seed = 0;

    // loop plumbing, not part of the method itself
    int batches_per_epoch = 0;  // 0: one pass over the training pool
    bool meta_update_per_batch = false;
    bool meta_clamp = true;
    bool nonsaturating_gan = false;
    int gen_channels = 16;
    int disc_channels = 16;
    bool keep_epoch_checkpoints = false;

    bool supervised() const { return mode == "supervised"; }
    int batch_size() const { return P * K; }
};

inline void validate_config(const TrainConfig& c) {
    require(c.lr >= 0.0, "config: lr must be >= 0");
    require(c.beta1 >= 0.0 && c.beta1 < 1.0 && c.beta2 >= 0.0 && c.beta2 < 1.0, "config: betas must be in [0,1)");
    require(c.epochs >= 1, "config: epochs must be >= 1");
    require(c.m >= 0.0, "config: margin must be >= 0");
    require(c.lambda >= 0.0, "config: lambda must be >= 0");
    require(c.eps_255 > 0.0 && c.eps_255 <= 255.0, "config: eps_255 must be in (0, 255]");
    require(c.flip_prob >= 0.0 && c.flip_prob < 0.5, "config: flip_prob must be in [0, 0.5)");
    require(c.P >= 2 && c.K >= 1, "config: need P >= 2 and K >= 1");
    require(c.mode == "supervised" || c.mode == "unsupervised", "config: mode must be supervised or unsupervised");
    require(c.batches_per_epoch >= 0, "config: batches_per_epoch must be >= 0");
    require(c.gen_channels >= 2 && c.disc_channels >= 2, "config: network widths must be >= 2");
}

namespace detail {

inline std::string fmt_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

inline bool parse_bool(const std::string& s, const std::string& key) {
    if (s == "1" || s == "true" || s == "yes" || s == "on") return true;
    if (s == "0" || s == "false" || s == "no" || s == "off") return false;
    fatal("config: bad boolean for " + key + ": " + s);
    return false;
}

inline std::string trim(const std::string& s) {
    std::size_t a = s.find_first_not_of(" \t\r\n");
    if (a == std::string::npos) return "";
    std::size_t b = s.find_last_not_of(" \t\r\n");
    return s.substr(a, b - a + 1);
}

}  // namespace detail

namespace detail {

inline double parse_double(const std::string& value, const std::string& key) {
    try {
        std::size_t used = 0;
        double v = std::stod(value, &used);
        if (used != value.size()) fatal("config: bad number for " + key + ": " + value);
        return v;
    } catch (const FatalError&) {
        throw;
    } catch (const std::exception&) {
        fatal("config: bad number for " + key + ": " + value);
    }
}

inline int parse_int(const std::string& value, const std::string& key) {
    try {
        std::size_t used = 0;
        int v = std::stoi(value, &used);
        if (used != value.size()) fatal("config: bad integer for " + key + ": " + value);
        return v;
    } catch (const FatalError&) {
        throw;
    } catch (const std::exception&) {
        fatal("config: bad integer for " + key + ": " + value);
    }
}

// key=value lines; '#' starts a comment, blank lines skipped.
inline std::vector<std::pair<std::string, std::string>> read_kv_file(const std::string& path) {
    std::ifstream in(path);
    if (!in.good()) fatal("cannot open config file: " + path);
    std::vector<std::pair<std::string, std::string>> entries;
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        std::size_t hash = line.find('#');
        if (hash != std::string::npos) line.resize(hash);
        line = trim(line);
        if (line.empty()) continue;
        std::size_t eq = line.find('=');
        if (eq == std::string::npos)
            fatal("config: line " + std::to_string(lineno) + " of " + path + " is not key=value");
        entries.emplace_back(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
    }
    return entries;
}

}  // namespace detail

inline void apply_config_entry(TrainConfig& c, const std::string& key, const std::string& value) {
    auto d = [&] { return detail::parse_double(value, key); };
    auto i = [&] { return detail::parse_int(value, key); };
    auto b = [&] { return detail::parse_bool(value, key); };
    if (key == "lr") c.lr = d();
    else if (key == "beta1") c.beta1 = d();
    else if (key == "beta2") c.beta2 = d();
    else if (key == "epochs") c.epochs = i();
    else if (key == "m") c.m = d();
    else if (key == "lambda") c.lambda = d();
    else if (key == "eps_255") c.eps_255 = d();
    else if (key == "flip_prob") c.flip_prob = d();
    else if (key == "P") c.P = i();
    else if (key == "K") c.K = i();
    else if (key == "mode") c.mode = value;
    else if (key == "use_meta") c.use_meta = b();
    else if (key == "use_mask") c.use_mask = b();
    else if (key == "seed") c.seed = i();
    else if (key == "batches_per_epoch") c.batches_per_epoch = i();
    else if (key == "meta_update_per_batch") c.meta_update_per_batch = b();
    else if (key == "meta_clamp") c.meta_clamp = b();
    else if (key == "nonsaturating_gan") c.nonsaturating_gan = b();
    else if (key == "gen_channels") c.gen_channels = i();
    else if (key == "disc_channels") c.disc_channels = i();
    else if (key == "keep_epoch_checkpoints") c.keep_epoch_checkpoints = b();
    else fatal("config: unknown key: " + key);
}

// Declarative key=value file; '#' starts a comment, later entries win.
inline TrainConfig parse_config_file(const std::string& path, TrainConfig base = {}) {
    for (const auto& [key, value] : detail::read_kv_file(path)) apply_config_entry(base, key, value);
    return base;
}

inline std::string canonical_config(const TrainConfig& c) {
    std::map<std::string, std::string> kv{
        {"lr", detail::fmt_double(c.lr)},
        {"beta1", detail::fmt_double(c.beta1)},
        {"beta2", detail::fmt_double(c.beta2)},
        {"epochs", std::to_string(c.epochs)},
        {"m", detail::fmt_double(c.m)},
        {"lambda", detail::fmt_double(c.lambda)},
        {"eps_255", detail::fmt_double(c.eps_255)},
        {"flip_prob", detail::fmt_double(c.flip_prob)},
        {"P", std::to_string(c.P)},
        {"K", std::to_string(c.K)},
        {"mode", c.mode},
        {"use_meta", c.use_meta ? "1" : "0"},
        {"use_mask", c.use_mask ? "1" : "0"},
        {"seed", std::to_string(c.seed)},
        {"batches_per_epoch", std::to_string(c.batches_per_epoch)},
        {"meta_update_per_batch", c.meta_update_per_batch ? "1" : "0"},
        {"meta_clamp", c.meta_clamp ? "1" : "0"},
        {"nonsaturating_gan", c.nonsaturating_gan ? "1" : "0"},
        {"gen_channels", std::to_string(c.gen_channels)},
        {"disc_channels", std::to_string(c.disc_channels)},
        {"keep_epoch_checkpoints", c.keep_epoch_checkpoints ? "1" : "0"},
    };
    std::string out;
    for (const auto& [k, v] : kv) out += k + "=" + v + "\n";
    return out;
}

inline std::string config_hash(const TrainConfig& c) {
    std::string s = canonical_config(c);
    return hex64(fnv1a64(s.data(), s.size()));
}

// ------------------------------------------------------------- label flips

// Each target independently inverted with probability p.
inline std::vector<std::uint8_t> flip_labels(const std::vector<std::uint8_t>& targets, double p, Rng& rng) {
    require(p >= 0.0 && p < 0.5, "flip_labels: p must be in [0, 0.5)");
    std::vector<std::uint8_t> out = targets;
    for (auto& t : out)
        if (rng.bernoulli(p)) t = t ? 0 : 1;
    return out;
}

// -------------------------------------------------------------- step trace

inline constexpr const char* kTraceHeader = "epoch,batch,d_loss,g_gan,g_trip,meta_loss,wall_ms";

struct StepTrace {
    int epoch = 0;
    int batch = 0;
    double d_loss = 0;
    double g_gan = 0;
    double g_trip = 0;
    double meta_loss = 0;
    double g_grad_norm = 0;  // bookkeeping only, not in the trace line
    double wall_ms = 0;
};

inline std::string trace_line(const StepTrace& t) {
    std::string s = std::to_string(t.epoch) + "," + std::to_string(t.batch);
    for (double v : {t.d_loss, t.g_gan, t.g_trip, t.meta_loss, t.wall_ms}) s += "," + detail::fmt_double(v);
    return s;
}

inline void write_trace_file(const std::string& path, const std::vector<StepTrace>& traces) {
    std::ofstream out(path, std::ios::trunc);
    require(out.good(), "cannot write trace file: " + path);
    out << kTraceHeader << "\n";
    for (const StepTrace& t : traces) out << trace_line(t) << "\n";
    require(out.good(), "cannot write trace file: " + path);
}

// ------------------------------------------------------------ trainer core

struct MetaTrainer {
    TrainConfig cfg;
    AttackBudget budget;
    EmbedderHandle f;
    Rng rng;
    Generator gen;
    Discriminator disc;
    NamedParams g_params, d_params;
    Adam opt_d, opt_g, opt_meta;

    Var last_delta;  // live graph from the most recent meta-train step

    MetaTrainer(const EmbedderHandle& surrogate, const TrainConfig& config)
        : cfg(checked(config)),
          budget(config.eps_255),
          f(surrogate),
          rng(static_cast<std::uint64_t>(config.seed)),
          gen(config.gen_channels, rng),
          disc(config.disc_channels, rng),
          g_params(gen.named_params()),
          d_params(disc.named_params()),
          opt_d(values_of(d_params), config.lr, config.beta1, config.beta2),
          opt_g(values_of(g_params), config.lr, config.beta1, config.beta2),
          opt_meta(values_of(g_params), config.lr, config.beta1, config.beta2) {
        require(f.dim > 0 && f.forward_graph != nullptr, "trainer: surrogate embedder not initialized");
    }

    // Inner iteration: mask, discriminator step, generator step, perturbation
    // extraction with the just-updated generator (kept as a live graph).
    StepTrace meta_train_step(const ImageBatch& batch_T, int epoch = 0, int batch_idx = 0) {
        auto t0 = std::chrono::steady_clock::now();
        StepTrace tr;
        tr.epoch = epoch;
        tr.batch = batch_idx;

        const Tensor& x = batch_T.images;
        require(x.shape.rank == 4 && x.shape.d[0] >= 2, "meta_train_step: need a batch of at least 2 images");
        int N = x.shape.d[0];

        Tensor x_in = x;
        if (cfg.use_mask) {
            std::vector<MaskTriplet> trips = mask_triplets_for_batch(batch_T, f, rng);
            std::vector<Mask> masks = compute_masks_batch(f, batch_T, trips, cfg.m);
            x_in = apply_masks_batch(x, masks);
        }

        // discriminator step: real = clean images, fake = detached attack output
        Tensor x_adv_d = project_linf(gen.forward(constant(x_in))->value, x, budget.epsilon);
        assert_within_budget(x_adv_d, x, budget.epsilon, "discriminator step");
        {
            std::vector<std::uint8_t> targets(static_cast<std::size_t>(2 * N), 0);
            for (int i = 0; i < N; ++i) targets[static_cast<std::size_t>(i)] = 1;
            std::vector<std::uint8_t> flipped = flip_labels(targets, cfg.flip_prob, rng);
            std::vector<std::uint8_t> flip_mask(targets.size());
            for (std::size_t i = 0; i < targets.size(); ++i) flip_mask[i] = flipped[i] != targets[i];

            Var logits_real = disc.forward(constant(x));
            Var logits_fake = disc.forward(constant(x_adv_d));
            Var d_loss = discriminator_loss_graph(logits_real, logits_fake, flip_mask);
            tr.d_loss = d_loss->value.data[0];
            opt_d.zero_grad();
            backward(d_loss);
            opt_d.step();
        }

        // generator step against the refreshed discriminator; theta_d gradients
        // from this phase are discarded
        {
            Var y = project_linf_graph(gen.forward(constant(x_in)), x, budget.epsilon);
            assert_within_budget(y->value, x, budget.epsilon, "generator step");
            Var gan = cfg.nonsaturating_gan ? generator_gan_loss_nonsaturating_graph(disc.forward(y))
                                            : generator_gan_loss_graph(disc.forward(y));
            Var trip = adversarial_triplet_term(y, batch_T);
            Var total = add(gan, mul_scalar(trip, cfg.lambda));
            tr.g_gan = gan->value.data[0];
            tr.g_trip = trip->value.data[0];
            opt_g.zero_grad();
            opt_d.zero_grad();
            backward(total);
            double sq = 0;
            for (const auto& [name, v] : g_params)
                if (!v->grad.data.empty())
                    for (double gv : v->grad.data) sq += gv * gv;
            tr.g_grad_norm = std::sqrt(sq);
            opt_g.step();
            opt_d.zero_grad();
        }

        // delta = x - projected generator output, with the updated parameters
        {
            Var y = project_linf_graph(gen.forward(constant(x_in)), x, budget.epsilon);
            assert_within_budget(y->value, x, budget.epsilon, "perturbation extraction");
            last_delta = sub(constant(x), y);
        }

        if (!std::isfinite(tr.d_loss) || !std::isfinite(tr.g_gan) || !std::isfinite(tr.g_trip))
            fatal("non-finite loss, step trace: " + trace_line(tr));
        tr.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
        return tr;
    }

    // Mis-ranking loss over adversarial triplets; mining runs on the
    // adversarial embeddings themselves, matching what enters the loss.
    Var adversarial_triplet_term(const Var& y_adv, const ImageBatch& batch) {
        Var emb = f(y_adv);
        int N = emb->value.shape.d[0];
        if (cfg.supervised()) {
            require_labeled(batch);
            std::vector<TripletIndices> trips = mine_triplets_supervised(emb->value, batch.labels);
            return adv_triplet_loss_graph(emb, trips, cfg.m);
        }
        int H = y_adv->value.shape.d[2], W = y_adv->value.shape.d[3];
        std::vector<AugmentParams> ps;
        for (int i = 0; i < N; ++i) ps.push_back(sample_augment_params(rng, H, W));
        Var emb_aug = f(augment_batch_graph(y_adv, ps));
        Tensor ext({2 * N, f.dim});
        std::memcpy(ext.data.data(), emb->value.data.data(), emb->value.data.size() * sizeof(double));
        std::memcpy(ext.row(N), emb_aug->value.data.data(), emb_aug->value.data.size() * sizeof(double));
        std::vector<int> a_idx, n_idx, n_aug_idx;
        bool any_aug_negative = false;
        for (int i = 0; i < N; ++i) {
            TripletIndices t = mine_triplet_unsupervised(ext, i, N + i);
            a_idx.push_back(i);
            if (t.negative >= N) {
                any_aug_negative = true;
                n_idx.push_back(0);
                n_aug_idx.push_back(t.negative - N);
            } else {
                n_idx.push_back(t.negative);
                n_aug_idx.push_back(-1);
            }
        }
        Var fa = gather_rows(emb, a_idx);
        Var fp = emb_aug;
        Var fn;
        if (!any_aug_negative) {
            fn = gather_rows(emb, n_idx);
        } else {
            // negatives may live in either half of the extended matrix
            Tensor picked({N, f.dim});
            for (int i = 0; i < N; ++i) {
                const double* src = n_aug_idx[static_cast<std::size_t>(i)] >= 0
                                        ? emb_aug->value.row(n_aug_idx[static_cast<std::size_t>(i)])
                                        : emb->value.row(n_idx[static_cast<std::size_t>(i)]);
                std::memcpy(picked.row(i), src, static_cast<std::size_t>(f.dim) * sizeof(double));
            }
            fn = constant(picked);
        }
        return adv_triplet_loss_rows(fa, fn, fp, cfg.m);
    }

    // Meta-test loss on a batch from A: anchors are x - delta (index-aligned
    // with the last meta-train batch), clamped back into the valid region;
    // negatives and positives stay clean. Differentiable w.r.t. theta_g
    // through delta.
    Var meta_test_loss_graph(const ImageBatch& batch_A) {
        require(last_delta != nullptr, "meta_test_loss: no perturbation available; run a meta-train step first");
        const Tensor& xa = batch_A.images;
        require(xa.shape == last_delta->value.shape, "meta_test_loss: batch sizes of T and A must match");

        Var raw = sub(constant(xa), last_delta);
        Var anchors;
        if (cfg.meta_clamp) {
            anchors = project_linf_graph(raw, xa, budget.epsilon);
            assert_within_budget(anchors->value, xa, budget.epsilon, "meta-test anchors");
        } else {
            anchors = raw;
            assert_within_budget_reused(anchors->value, xa, budget.epsilon, "meta-test anchors");
        }
        Var emb_adv = f(anchors);
        Tensor clean = f.embed(xa);
        int N = xa.shape.d[0];

        std::vector<int> a_idx, n_idx, p_idx;
        Tensor pos_source = clean;
        if (cfg.supervised()) {
            require_labeled(batch_A);
            for (const TripletIndices& t : mine_triplets_supervised(clean, batch_A.labels)) {
                a_idx.push_back(t.anchor);
                n_idx.push_back(t.negative);
                p_idx.push_back(t.positive);
            }
        } else {
            int H = xa.shape.d[2], W = xa.shape.d[3];
            std::vector<AugmentParams> ps;
            for (int i = 0; i < N; ++i) ps.push_back(sample_augment_params(rng, H, W));
            Tensor aug = augment_batch_graph(constant(xa), ps)->value;
            Tensor aug_emb = f.embed(aug);
            Tensor ext({2 * N, f.dim});
            std::memcpy(ext.data.data(), clean.data.data(), clean.data.size() * sizeof(double));
            std::memcpy(ext.row(N), aug_emb.data.data(), aug_emb.data.size() * sizeof(double));
            pos_source = ext;
            for (int i = 0; i < N; ++i) {
                TripletIndices t = mine_triplet_unsupervised(ext, i, N + i);
                a_idx.push_back(i);
                n_idx.push_back(t.negative);
                p_idx.push_back(N + i);
            }
            clean = ext;
        }
        require(!a_idx.empty(), "meta_test_loss: no triplets minable from the meta-test batch");

        Tensor fn({static_cast<int>(n_idx.size()), f.dim}), fp({static_cast<int>(p_idx.size()), f.dim});
        for (std::size_t i = 0; i < n_idx.size(); ++i) {
            std::memcpy(fn.row(static_cast<int>(i)), clean.row(n_idx[i]), static_cast<std::size_t>(f.dim) * sizeof(double));
            std::memcpy(fp.row(static_cast<int>(i)), pos_source.row(p_idx[i]), static_cast<std::size_t>(f.dim) * sizeof(double));
        }
        Var fa = gather_rows(emb_adv, a_idx);
        return adv_triplet_loss_rows(fa, constant(fn), constant(fp), cfg.m);
    }

    // One Adam step on theta_g minimizing lambda * loss; runs on a dedicated
    // optimizer so meta updates never disturb the inner Adam moments.
    void meta_test_update(const Var& loss) {
        opt_meta.zero_grad();
        backward(mul_scalar(loss, cfg.lambda));
        opt_meta.step();
        opt_meta.zero_grad();
    }

    void accumulate_meta_gradient(const Var& loss) {
        opt_meta.zero_grad();
        backward(mul_scalar(loss, cfg.lambda));
        if (meta_grad_acc_.empty())
            for (const auto& [name, v] : g_params) meta_grad_acc_.emplace_back(v->value.shape);
        std::size_t i = 0;
        for (const auto& [name, v] : g_params) {
            if (!v->grad.data.empty())
                for (std::size_t j = 0; j < v->grad.data.size(); ++j) meta_grad_acc_[i].data[j] += v->grad.data[j];
            ++i;
        }
        ++meta_batches_;
        opt_meta.zero_grad();
    }

    void apply_accumulated_meta_update() {
        if (meta_batches_ == 0) return;
        for (Tensor& t : meta_grad_acc_)
            for (double& v : t.data) v /= meta_batches_;
        opt_meta.step_with(meta_grad_acc_);
        meta_grad_acc_.clear();
        meta_batches_ = 0;
    }

    std::uint64_t gen_hash() const { return hash_params(g_params); }
    std::uint64_t disc_hash() const { return hash_params(d_params); }

  private:
    static TrainConfig checked(TrainConfig c) {
        validate_config(c);
        return c;
    }
    static void require_labeled(const ImageBatch& b) {
        bool any = false;
        for (int l : b.labels) any = any || l != kAbsent;
        if (!any) fatal("supervised mode requires identity labels");
    }

    std::vector<Tensor> meta_grad_acc_;
    int meta_batches_ = 0;
};

// ------------------------------------------------------------- checkpoints

inline void save_attack_checkpoint(const std::string& path, MetaTrainer& tr, int epochs_done) {
    CheckpointData c;
    c.meta["kind"] = "attack";
    c.meta["gen_channels"] = std::to_string(tr.cfg.gen_channels);
    c.meta["disc_channels"] = std::to_string(tr.cfg.disc_channels);
    c.meta["eps_255"] = detail::fmt_double(tr.cfg.eps_255);
    c.meta["mode"] = tr.cfg.mode;
    c.meta["use_mask"] = tr.cfg.use_mask ? "1" : "0";
    c.meta["use_meta"] = tr.cfg.use_meta ? "1" : "0";
    c.meta["surrogate"] = tr.f.name;
    c.meta["epochs_done"] = std::to_string(epochs_done);
    c.meta["config_hash"] = config_hash(tr.cfg);
    c.meta["config"] = canonical_config(tr.cfg);
    put_params(c, tr.g_params);
    put_params(c, tr.d_params);
    put_adam_state(c, "opt_d", tr.opt_d, tr.d_params);
    put_adam_state(c, "opt_g", tr.opt_g, tr.g_params);
    put_adam_state(c, "opt_meta", tr.opt_meta, tr.g_params);
    save_checkpoint(path, c);
}

struct AttackArtifacts {
    Generator gen;
    double eps_255 = 16.0;
    std::string mode, surrogate, config_hash;
    bool use_mask = false, use_meta = false;
    int epochs_done = 0;
};

inline AttackArtifacts load_attack_artifacts(const std::string& path) {
    CheckpointData c = load_checkpoint(path);
    if (c.meta_or("kind", "") != "attack") fatal("checkpoint is not an attack checkpoint: " + path);
    AttackArtifacts a;
    Rng scratch(0);
    a.gen = Generator(std::stoi(c.meta_or("gen_channels", "16")), scratch);
    load_params_into(c, a.gen.named_params(), "generator");
    set_requires_grad(a.gen.named_params(), false);
    a.eps_255 = std::stod(c.meta_or("eps_255", "16"));
    a.mode = c.meta_or("mode", "supervised");
    a.surrogate = c.meta_or("surrogate", "");
    a.config_hash = c.meta_or("config_hash", "");
    a.use_mask = c.meta_or("use_mask", "0") == "1";
    a.use_meta = c.meta_or("use_meta", "0") == "1";
    a.epochs_done = std::stoi(c.meta_or("epochs_done", "0"));
    return a;
}

// ---------------------------------------------------------------- training

struct TrainHooks {
    std::function<void(const MetaTrainer&, const StepTrace&)> after_step;
    std::function<void(const MetaTrainer&, int)> after_epoch;
};

struct TrainResult {
    std::vector<StepTrace> traces;
    std::string checkpoint_path;
    std::string trace_path;
    std::string config_hash;
    int epochs_run = 0;
};

inline int default_batches_per_epoch(const Dataset& ds, const TrainConfig& cfg) {
    std::vector<int> pool = ds.split_indices(SplitRole::meta_train);
    int n = pool.empty() ? ds.size() : static_cast<int>(pool.size());
    return std::max(1, (n + cfg.batch_size() - 1) / cfg.batch_size());
}

inline TrainResult train(const Dataset& ds_T, const Dataset* ds_A, const EmbedderHandle& f, const TrainConfig& cfg,
                         const std::string& out_dir = "", const TrainHooks& hooks = {}) {
    validate_config(cfg);
    require(!cfg.use_meta || ds_A != nullptr, "meta-learning requires a meta-test dataset");
    require(ds_T.size() >= cfg.batch_size(), "training dataset too small for the batch spec");
    if (cfg.use_meta) require(ds_A->size() >= cfg.batch_size(), "meta-test dataset too small for the batch spec");

    MetaTrainer trainer(f, cfg);
    std::uint64_t f_hash = f.param_hash();
    int bpe = cfg.batches_per_epoch > 0 ? cfg.batches_per_epoch : default_batches_per_epoch(ds_T, cfg);

    namespace fs = std::filesystem;
    std::string ckpt_path, trace_path;
    if (!out_dir.empty()) {
        fs::create_directories(out_dir);
        ckpt_path = (fs::path(out_dir) / "attack.ckpt").string();
        trace_path = (fs::path(out_dir) / "trace.csv").string();
    }

    auto draw = [&](const Dataset& ds) {
        return cfg.supervised() ? sample_pk_batch(ds, cfg.P, cfg.K, trainer.rng)
                                : sample_random_batch(ds, cfg.batch_size(), trainer.rng);
    };

    TrainResult res;
    res.config_hash = config_hash(cfg);
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        for (int b = 0; b < bpe; ++b) {
            ImageBatch batch_T = draw(ds_T);
            StepTrace tr = trainer.meta_train_step(batch_T, epoch, b);
            if (cfg.use_meta) {
                ImageBatch batch_A = draw(*ds_A);
                Var ml = trainer.meta_test_loss_graph(batch_A);
                tr.meta_loss = ml->value.data[0];
                if (!std::isfinite(tr.meta_loss)) fatal("non-finite loss, step trace: " + trace_line(tr));
                if (cfg.meta_update_per_batch)
                    trainer.meta_test_update(ml);
                else
                    trainer.accumulate_meta_gradient(ml);
            }
            res.traces.push_back(tr);
            if (hooks.after_step) hooks.after_step(trainer, tr);
        }
        if (cfg.use_meta && !cfg.meta_update_per_batch) trainer.apply_accumulated_meta_update();
        require(f.param_hash() == f_hash, "surrogate parameters changed during training");
        res.epochs_run = epoch + 1;
        if (!out_dir.empty()) {
            save_attack_checkpoint(ckpt_path, trainer, epoch + 1);
            if (cfg.keep_epoch_checkpoints) {
                char name[32];
                std::snprintf(name, sizeof(name), "attack_epoch%03d.ckpt", epoch + 1);
                save_attack_checkpoint((fs::path(out_dir) / name).string(), trainer, epoch + 1);
            }
            write_trace_file(trace_path, res.traces);
        }
        if (hooks.after_epoch) hooks.after_epoch(trainer, epoch);
    }
    res.checkpoint_path = ckpt_path;
    res.trace_path = trace_path;
    return res;
}

}  // namespace mega

#endif
