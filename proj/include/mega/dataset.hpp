#ifndef MEGA_DATASET_HPP
#define MEGA_DATASET_HPP

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <regex>
#include <set>
#include <string>
#include <vector>

#include "mega/autodiff.hpp"
#include "mega/image_io.hpp"
#include "mega/rng.hpp"
#include "mega/tensor.hpp"

namespace mega {

inline constexpr int kAbsent = -1;

enum class SplitRole { meta_train, meta_test, query, gallery };

inline const char* split_name(SplitRole r) {
    switch (r) {
        case SplitRole::meta_train: return "meta_train";
        case SplitRole::meta_test: return "meta_test";
        case SplitRole::query: return "query";
        default: return "gallery";
    }
}

inline SplitRole split_from_name(const std::string& s) {
    if (s == "meta_train") return SplitRole::meta_train;
    if (s == "meta_test") return SplitRole::meta_test;
    if (s == "query") return SplitRole::query;
    if (s == "gallery") return SplitRole::gallery;
    fatal("unknown split name: " + s);
}

struct Sample {
    std::string path;         // source or synthetic name, unique within a dataset
    Tensor image;             // 3 x H x W in [0,1]
    int identity = kAbsent;
    int camera = kAbsent;
    SplitRole split = SplitRole::meta_train;
};

struct Dataset {
    std::string name;
    std::vector<Sample> samples;
    int num_identities = 0;
    std::pair<double, double> pixel_range{0.0, 1.0};

    int size() const { return static_cast<int>(samples.size()); }

    std::vector<int> split_indices(SplitRole r) const {
        std::vector<int> idx;
        for (int i = 0; i < size(); ++i)
            if (samples[static_cast<std::size_t>(i)].split == r) idx.push_back(i);
        return idx;
    }

    int image_size() const { return samples.empty() ? 0 : samples[0].image.shape.d[1]; }
};

// New dataset holding only the samples of one split (labels kept as-is).
inline Dataset filter_split(const Dataset& ds, SplitRole r) {
    Dataset out;
    out.name = ds.name + "/" + split_name(r);
    out.num_identities = ds.num_identities;
    for (int i : ds.split_indices(r)) out.samples.push_back(ds.samples[static_cast<std::size_t>(i)]);
    return out;
}

// Unsupervised view: identity hidden on every sample.
inline Dataset strip_labels(Dataset ds) {
    for (auto& s : ds.samples) s.identity = kAbsent;
    ds.num_identities = 0;
    return ds;
}

struct ImageBatch {
    Tensor images;                    // N x 3 x H x W
    std::vector<int> labels;          // kAbsent entries when unlabeled
    std::vector<int> sample_indices;  // positions in the source dataset

    int size() const { return images.shape.rank == 4 ? images.shape.d[0] : 0; }
};

inline ImageBatch batch_from_indices(const Dataset& ds, const std::vector<int>& idx) {
    require(!idx.empty(), "batch_from_indices: empty index list");
    const Tensor& first = ds.samples[static_cast<std::size_t>(idx[0])].image;
    int C = first.shape.d[0], H = first.shape.d[1], W = first.shape.d[2];
    ImageBatch b;
    b.images = Tensor({static_cast<int>(idx.size()), C, H, W});
    std::size_t per = static_cast<std::size_t>(C) * H * W;
    for (std::size_t i = 0; i < idx.size(); ++i) {
        const Sample& s = ds.samples[static_cast<std::size_t>(idx[i])];
        require(s.image.data.size() == per, "batch_from_indices: mixed image sizes");
        std::memcpy(b.images.data.data() + i * per, s.image.data.data(), per * sizeof(double));
        b.labels.push_back(s.identity);
        b.sample_indices.push_back(idx[i]);
    }
    return b;
}

// ------------------------------------------------------------- folder loading

enum class NamingScheme { reid_underscore, flat_unlabeled };

struct LoadStats {
    int loaded = 0;
    int skipped = 0;
};

namespace detail {
inline bool has_image_ext(const std::filesystem::path& p) {
    std::string e = p.extension().string();
    std::transform(e.begin(), e.end(), e.begin(), [](unsigned char c) { return std::tolower(c); });
    return e == ".png" || e == ".jpg" || e == ".jpeg" || e == ".bmp";
}
}  // namespace detail

// Loads every image under `dir` (recursively), lexicographically sorted by
// relative path. reid_underscore parses `<personID>_c<cameraID>_<frame>.<ext>`
// filenames and re-indexes identities to 0..n-1; flat_unlabeled keeps all
// labels ABSENT. split_spec maps first-level subdirectory names to splits;
// files not under a mapped subdirectory get default_split.
inline Dataset load_image_folder(const std::string& dir, NamingScheme naming,
                                 const std::map<std::string, SplitRole>& split_spec = {},
                                 SplitRole default_split = SplitRole::meta_train, int resize_to = 0,
                                 LoadStats* stats = nullptr) {
    namespace fs = std::filesystem;
    require(fs::is_directory(dir), "not a directory: " + dir);

    std::vector<std::string> rel_paths;
    for (const auto& entry : fs::recursive_directory_iterator(dir))
        if (entry.is_regular_file() && detail::has_image_ext(entry.path()))
            rel_paths.push_back(fs::relative(entry.path(), dir).generic_string());
    std::sort(rel_paths.begin(), rel_paths.end());

    static const std::regex reid_pat(R"((\d+)_c(\d+)_.*)");

    Dataset ds;
    ds.name = fs::path(dir).filename().string();
    LoadStats local;
    std::set<std::string> seen;
    std::map<int, int> id_remap;  // original person id -> contiguous label
    for (const std::string& rel : rel_paths) {
        if (!seen.insert(rel).second) fatal("duplicate path in dataset: " + rel);
        Tensor img = load_image_chw((fs::path(dir) / rel).string(), resize_to);
        if (img.empty()) {
            std::fprintf(stderr, "warning: unreadable image skipped: %s\n", rel.c_str());
            ++local.skipped;
            continue;
        }
        Sample s;
        s.path = rel;
        s.image = std::move(img);
        s.split = default_split;
        fs::path rp(rel);
        if (rp.has_parent_path()) {
            auto it = split_spec.find(rp.begin()->string());
            if (it != split_spec.end()) s.split = it->second;
        }
        if (naming == NamingScheme::reid_underscore) {
            std::smatch m;
            std::string stem = rp.stem().string();
            if (!std::regex_match(stem, m, reid_pat)) {
                std::fprintf(stderr, "warning: filename does not match <id>_c<cam>_<frame>: %s\n", rel.c_str());
                ++local.skipped;
                continue;
            }
            int pid = std::stoi(m[1]);
            auto [it, inserted] = id_remap.emplace(pid, static_cast<int>(id_remap.size()));
            s.identity = it->second;
            s.camera = std::stoi(m[2]);
        }
        ds.samples.push_back(std::move(s));
        ++local.loaded;
    }
    if (ds.samples.empty()) fatal("no usable images in " + dir);
    ds.num_identities = static_cast<int>(id_remap.size());
    if (stats) *stats = local;
    return ds;
}

// ------------------------------------------------------------- manifest files

inline constexpr const char* kManifestHeader = "path,identity,camera,split";

inline std::string manifest_field(int v) { return v == kAbsent ? "-" : std::to_string(v); }

inline void write_manifest(const Dataset& ds, const std::string& path) {
    std::ofstream out(path);
    require(static_cast<bool>(out), "cannot write manifest: " + path);
    out << kManifestHeader << "\n";
    for (const auto& s : ds.samples)
        out << s.path << "," << manifest_field(s.identity) << "," << manifest_field(s.camera) << ","
            << split_name(s.split) << "\n";
}

// Writes images as PNGs plus manifest.csv into dir (created if needed).
inline void write_dataset(const Dataset& ds, const std::string& dir) {
    namespace fs = std::filesystem;
    fs::create_directories(dir);
    for (const auto& s : ds.samples) {
        fs::path p = fs::path(dir) / s.path;
        if (p.has_parent_path()) fs::create_directories(p.parent_path());
        save_image_chw(p.string(), s.image);
    }
    write_manifest(ds, (fs::path(dir) / "manifest.csv").string());
}

inline Dataset load_manifest_dataset(const std::string& dir, int resize_to = 0) {
    namespace fs = std::filesystem;
    fs::path mpath = fs::path(dir) / "manifest.csv";
    std::ifstream in(mpath);
    require(static_cast<bool>(in), "cannot read manifest: " + mpath.string());
    Dataset ds;
    ds.name = fs::path(dir).filename().string();
    std::string line;
    std::set<std::string> seen;
    std::set<int> ids;
    bool first = true;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        if (first && line == kManifestHeader) {
            first = false;
            continue;
        }
        first = false;
        std::vector<std::string> f;
        std::size_t start = 0;
        for (int i = 0; i < 3; ++i) {
            std::size_t comma = line.find(',', start);
            require(comma != std::string::npos, "malformed manifest line: " + line);
            f.push_back(line.substr(start, comma - start));
            start = comma + 1;
        }
        f.push_back(line.substr(start));
        if (!seen.insert(f[0]).second) fatal("duplicate path in dataset: " + f[0]);
        Sample s;
        s.path = f[0];
        s.identity = f[1] == "-" ? kAbsent : std::stoi(f[1]);
        s.camera = f[2] == "-" ? kAbsent : std::stoi(f[2]);
        s.split = split_from_name(f[3]);
        s.image = load_image_chw((fs::path(dir) / f[0]).string(), resize_to);
        if (s.image.empty()) fatal("unreadable image listed in manifest: " + f[0]);
        if (s.identity != kAbsent) ids.insert(s.identity);
        ds.samples.push_back(std::move(s));
    }
    require(!ds.samples.empty(), "empty manifest: " + mpath.string());
    for (const auto& s : ds.samples)
        if (s.identity != kAbsent)
            require(s.identity < static_cast<int>(ids.size()), "manifest identities not contiguous from 0");
    ds.num_identities = static_cast<int>(ids.size());
    return ds;
}

// Loads a dataset directory: manifest.csv if present, otherwise raw folder.
inline Dataset load_dataset_dir(const std::string& dir, NamingScheme naming, int resize_to = 0,
                                LoadStats* stats = nullptr) {
    if (std::filesystem::exists(std::filesystem::path(dir) / "manifest.csv"))
        return load_manifest_dataset(dir, resize_to);
    return load_image_folder(dir, naming, {}, SplitRole::meta_train, resize_to, stats);
}

// --------------------------------------------------------------- toy dataset

namespace detail {

inline void hsv_to_rgb(double h, double s, double v, double rgb[3]) {
    h = h - std::floor(h);
    double c = v * s;
    double hp = h * 6.0;
    double x = c * (1.0 - std::abs(std::fmod(hp, 2.0) - 1.0));
    double r = 0, g = 0, b = 0;
    if (hp < 1) { r = c; g = x; }
    else if (hp < 2) { r = x; g = c; }
    else if (hp < 3) { g = c; b = x; }
    else if (hp < 4) { g = x; b = c; }
    else if (hp < 5) { r = x; b = c; }
    else { r = c; b = x; }
    double m = v - c;
    rgb[0] = r + m;
    rgb[1] = g + m;
    rgb[2] = b + m;
}

struct ToyIdentity {
    double rgb_body[3];
    double rgb_stripe[3];
    int shape;          // 0 circle, 1 square, 2 triangle
    double size_frac;   // body radius as a fraction of image size
    int stripe_period;  // rows between stripes
    int stripe_axis;    // 0 horizontal stripes, 1 vertical
};

}  // namespace detail

// Procedural re-ID stand-in. Each identity gets a distinct body color (evenly
// spaced hues), stripe color, shape and stripe layout; each rendering adds
// nuisance shift, brightness scaling, background tint and pixel noise. Splits
// per identity: floor(n/2) gallery, 1 query, rest meta_train.
inline Dataset generate_toy_dataset(int num_ids, int imgs_per_id, int image_size, int seed) {
    require(num_ids >= 2, "generate_toy_dataset: num_ids must be >= 2");
    require(imgs_per_id >= 2, "generate_toy_dataset: imgs_per_id must be >= 2");
    require(image_size >= 16, "generate_toy_dataset: image_size must be >= 16");

    Rng rng(static_cast<std::uint64_t>(seed) * 0x9e3779b97f4a7c15ull + 0x2545f4914f6cdd1dull);
    const int S = image_size;

    std::vector<detail::ToyIdentity> ids(static_cast<std::size_t>(num_ids));
    for (int i = 0; i < num_ids; ++i) {
        auto& t = ids[static_cast<std::size_t>(i)];
        double hue = static_cast<double>(i) / num_ids;
        detail::hsv_to_rgb(hue, 0.85, 0.9, t.rgb_body);
        detail::hsv_to_rgb(hue + 0.5, 0.85, 0.75, t.rgb_stripe);
        t.shape = i % 3;
        t.size_frac = rng.uniform(0.32, 0.40);
        t.stripe_period = 3 + (i % 3);
        t.stripe_axis = (i / 3) % 2;
    }

    Dataset ds;
    ds.name = "toy";
    ds.num_identities = num_ids;
    for (int id = 0; id < num_ids; ++id) {
        const auto& t = ids[static_cast<std::size_t>(id)];
        for (int j = 0; j < imgs_per_id; ++j) {
            double cx = S * 0.5 + rng.uniform(-0.06, 0.06) * S;
            double cy = S * 0.5 + rng.uniform(-0.06, 0.06) * S;
            double radius = t.size_frac * S * rng.uniform(0.92, 1.08);
            double brightness = rng.uniform(0.92, 1.08);
            double bg = rng.uniform(0.62, 0.68);
            int stripe_phase = rng.uniform_int(t.stripe_period);

            Sample s;
            s.identity = id;
            char buf[64];
            std::snprintf(buf, sizeof(buf), "id%03d_img%02d.png", id, j);
            s.path = buf;
            s.image = Tensor({3, S, S});
            for (int y = 0; y < S; ++y)
                for (int x = 0; x < S; ++x) {
                    double dx = x - cx, dy = y - cy;
                    bool inside = false;
                    switch (t.shape) {
                        case 0: inside = dx * dx + dy * dy <= radius * radius; break;
                        case 1: inside = std::abs(dx) <= radius && std::abs(dy) <= radius * 1.1; break;
                        default:
                            inside = dy >= -radius && dy <= radius &&
                                     std::abs(dx) <= (dy + radius) / (2.0 * radius) * radius;
                    }
                    const double* base;
                    if (inside) {
                        int along = t.stripe_axis == 0 ? y : x;
                        bool stripe = ((along + stripe_phase) % t.stripe_period) == 0;
                        base = stripe ? t.rgb_stripe : t.rgb_body;
                    } else {
                        base = nullptr;
                    }
                    for (int c = 0; c < 3; ++c) {
                        double v = base ? base[c] * brightness : bg;
                        v += rng.normal(0.0, 0.02);
                        s.image.at3(c, y, x) = std::min(std::max(v, 0.0), 1.0);
                    }
                }
            int n_gallery = imgs_per_id / 2;
            if (j < n_gallery) s.split = SplitRole::gallery;
            else if (j == n_gallery) s.split = SplitRole::query;
            else s.split = SplitRole::meta_train;
            ds.samples.push_back(std::move(s));
        }
    }
    return ds;
}

// ------------------------------------------------------------ batch sampling

// P identities x K images, sampled from the meta_train split when it is
// non-empty, otherwise from the whole dataset. Within an identity, images are
// drawn without replacement when it has >= K, else uniformly with replacement.
inline ImageBatch sample_pk_batch(const Dataset& ds, int P, int K, Rng& rng) {
    require(P >= 2 && K >= 1, "sample_pk_batch: need P >= 2, K >= 1");
    std::vector<int> pool = ds.split_indices(SplitRole::meta_train);
    if (pool.empty()) {
        pool.resize(static_cast<std::size_t>(ds.size()));
        for (int i = 0; i < ds.size(); ++i) pool[static_cast<std::size_t>(i)] = i;
    }
    std::map<int, std::vector<int>> by_id;
    for (int i : pool) {
        int id = ds.samples[static_cast<std::size_t>(i)].identity;
        require(id != kAbsent, "sample_pk_batch: dataset is unlabeled");
        by_id[id].push_back(i);
    }
    require(static_cast<int>(by_id.size()) >= P,
            "sample_pk_batch: only " + std::to_string(by_id.size()) + " identities available, need P=" + std::to_string(P));
    std::vector<int> id_list;
    for (const auto& [id, v] : by_id) id_list.push_back(id);
    rng.shuffle(id_list);
    id_list.resize(static_cast<std::size_t>(P));

    std::vector<int> chosen;
    for (int id : id_list) {
        const auto& imgs = by_id[id];
        if (static_cast<int>(imgs.size()) >= K) {
            std::vector<int> copy = imgs;
            rng.shuffle(copy);
            chosen.insert(chosen.end(), copy.begin(), copy.begin() + K);
        } else {
            for (int k = 0; k < K; ++k) chosen.push_back(imgs[static_cast<std::size_t>(rng.uniform_int(static_cast<int>(imgs.size())))]);
        }
    }
    return batch_from_indices(ds, chosen);
}

// Plain random batch without identity structure (unsupervised mode); draws
// without replacement unless n exceeds the pool.
inline ImageBatch sample_random_batch(const Dataset& ds, int n, Rng& rng) {
    require(n >= 1, "sample_random_batch: n must be >= 1");
    std::vector<int> pool = ds.split_indices(SplitRole::meta_train);
    if (pool.empty()) {
        pool.resize(static_cast<std::size_t>(ds.size()));
        for (int i = 0; i < ds.size(); ++i) pool[static_cast<std::size_t>(i)] = i;
    }
    rng.shuffle(pool);
    std::vector<int> chosen;
    for (int i = 0; i < n; ++i) chosen.push_back(pool[static_cast<std::size_t>(i % pool.size())]);
    return batch_from_indices(ds, chosen);
}

// ---------------------------------------------------------------- augmentation

struct AugmentParams {
    bool flip = false;
    CropBox box;        // crop window, resized back to full resolution
    double brightness = 0.0;
};

// Random flip p=0.5, crop keeping >= 80% area, brightness jitter +-0.2.
inline AugmentParams sample_augment_params(Rng& rng, int H, int W) {
    AugmentParams p;
    p.flip = rng.bernoulli(0.5);
    double side = std::sqrt(rng.uniform(0.8, 1.0));
    p.box.w = std::max(1, static_cast<int>(std::lround(side * W)));
    p.box.h = std::max(1, static_cast<int>(std::lround(side * H)));
    p.box.x0 = rng.uniform_int(W - p.box.w + 1);
    p.box.y0 = rng.uniform_int(H - p.box.h + 1);
    p.brightness = rng.uniform(-0.2, 0.2);
    return p;
}

// Differentiable augmentation of a batch; the same code path serves
// data-space augmentation via constant inputs.
inline Var augment_batch_graph(const Var& x, const std::vector<AugmentParams>& params) {
    int N = x->value.shape.d[0];
    require(static_cast<int>(params.size()) == N, "augment_batch_graph: param count mismatch");
    std::vector<std::uint8_t> flips;
    std::vector<CropBox> boxes;
    std::vector<double> brightness;
    for (const auto& p : params) {
        flips.push_back(p.flip ? 1 : 0);
        boxes.push_back(p.box);
        brightness.push_back(p.brightness);
    }
    return clamp01_pass(add_per_sample(crop_resize_bilinear(hflip_images(x, flips), boxes), brightness));
}

inline Tensor augment_with(const Tensor& chw, const AugmentParams& p) {
    require(chw.shape.rank == 3, "augment_with: expected C x H x W image");
    Tensor batched = chw;
    batched.shape = Shape{1, chw.shape.d[0], chw.shape.d[1], chw.shape.d[2]};
    Tensor out = augment_batch_graph(constant(batched), {p})->value;
    out.shape = chw.shape;
    return out;
}

inline Tensor augment(const Tensor& chw, Rng& rng) {
    require(chw.shape.rank == 3, "augment: expected C x H x W image");
    return augment_with(chw, sample_augment_params(rng, chw.shape.d[1], chw.shape.d[2]));
}

// -------------------------------------------------------------- triplet mining

struct TripletIndices {
    enum class Policy { supervised_batch_hard, mask_self_supervised, unsup_hard_negative };
    int anchor = -1;
    int negative = -1;
    int positive = -1;
    Policy policy = Policy::supervised_batch_hard;
};

// Batch-hard mining: per anchor, positive = same-identity sample at maximum
// embedding distance, negative = different-identity sample at minimum
// distance. Ties break toward the lowest index. Anchors without a second
// same-identity sample are skipped.
inline std::vector<TripletIndices> mine_triplets_supervised(const Tensor& embeddings, const std::vector<int>& labels) {
    require(embeddings.shape.rank == 2, "mine_triplets_supervised: N x d embeddings required");
    int N = embeddings.shape.d[0], D = embeddings.shape.d[1];
    require(static_cast<int>(labels.size()) == N, "mine_triplets_supervised: label count mismatch");
    bool two_ids = false;
    for (int i = 1; i < N; ++i)
        if (labels[static_cast<std::size_t>(i)] != labels[0]) two_ids = true;
    if (!two_ids) fatal("mine_triplets_supervised: batch contains a single identity");

    std::vector<TripletIndices> out;
    for (int a = 0; a < N; ++a) {
        int pos = -1, neg = -1;
        double pos_d = -1.0, neg_d = 0.0;
        for (int j = 0; j < N; ++j) {
            if (j == a) continue;
            double d = euclidean(embeddings.row(a), embeddings.row(j), D);
            if (labels[static_cast<std::size_t>(j)] == labels[static_cast<std::size_t>(a)]) {
                if (d > pos_d) {
                    pos_d = d;
                    pos = j;
                }
            } else {
                if (neg < 0 || d < neg_d) {
                    neg_d = d;
                    neg = j;
                }
            }
        }
        if (pos < 0) continue;  // no second sample of this identity
        out.push_back({a, neg, pos, TripletIndices::Policy::supervised_batch_hard});
    }
    return out;
}

// Unsupervised triplet: positive is the anchor's augmented copy; negative is
// the closest other batch member in embedding space.
inline TripletIndices mine_triplet_unsupervised(const Tensor& embeddings, int anchor, int aug_of_anchor) {
    require(embeddings.shape.rank == 2, "mine_triplet_unsupervised: N x d embeddings required");
    int N = embeddings.shape.d[0], D = embeddings.shape.d[1];
    require(N >= 3, "mine_triplet_unsupervised: batch must hold at least 3 samples");
    require(anchor >= 0 && anchor < N && aug_of_anchor >= 0 && aug_of_anchor < N && anchor != aug_of_anchor,
            "mine_triplet_unsupervised: bad indices");
    int neg = -1;
    double neg_d = 0.0;
    for (int j = 0; j < N; ++j) {
        if (j == anchor || j == aug_of_anchor) continue;
        double d = euclidean(embeddings.row(anchor), embeddings.row(j), D);
        if (neg < 0 || d < neg_d) {
            neg_d = d;
            neg = j;
        }
    }
    return {anchor, neg, aug_of_anchor, TripletIndices::Policy::unsup_hard_negative};
}

}  // namespace mega

#endif
