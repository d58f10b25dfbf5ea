#ifndef MEGA_RETRIEVAL_EVAL_HPP
#define MEGA_RETRIEVAL_EVAL_HPP

#include <algorithm>
#include <cstdio>
#include <ctime>
#include <fstream>
#include <ostream>
#include <string>
#include <vector>

#include <json.hpp>

#include "mega/attack_core.hpp"
#include "mega/dataset.hpp"
#include "mega/image_io.hpp"
#include "mega/nets.hpp"

namespace mega {

struct DistMatrix {
    Tensor d;  // Q x G
    std::vector<int> q_ids, g_ids;
    std::vector<int> q_cams, g_cams;  // empty when cameras are unknown

    int queries() const { return d.shape.d[0]; }
    int gallery() const { return d.shape.d[1]; }
    bool has_cams() const { return !q_cams.empty() && !g_cams.empty(); }
};

struct EvalReport {
    std::string target_model;
    std::string dataset;
    double map_before = 0, r1_before = 0, r10_before = 0;
    bool has_after = false;
    double map_after = 0, r1_after = 0, r10_after = 0;
    int queries = 0;
    int queries_without_match = 0;
    std::string config_hash;
    std::string timestamp;
};

inline DistMatrix pairwise_distances(const Tensor& qf, const Tensor& gf) {
    require(qf.shape.rank == 2 && gf.shape.rank == 2, "pairwise_distances: expected rank-2 feature matrices");
    require(qf.shape.d[1] == gf.shape.d[1], "pairwise_distances: feature dimension mismatch");
    int Q = qf.shape.d[0], G = gf.shape.d[0], D = qf.shape.d[1];
    DistMatrix dm;
    dm.d = Tensor({Q, G});
    for (int i = 0; i < Q; ++i) {
        const double* a = qf.row(i);
        for (int j = 0; j < G; ++j) {
            const double* b = gf.row(j);
            double s = 0;
            for (int k = 0; k < D; ++k) {
                double t = a[k] - b[k];
                s += t * t;
            }
            dm.d.at2(i, j) = std::sqrt(std::max(s, 0.0));
        }
    }
    return dm;
}

namespace detail {

// Gallery indices admissible for a query: the Market-style camera filter
// drops same-identity captures from the query's own camera.
inline bool gallery_admissible(const DistMatrix& dm, int q, int j, bool cam_filter) {
    if (!cam_filter || !dm.has_cams()) return true;
    return !(dm.g_ids[static_cast<std::size_t>(j)] == dm.q_ids[static_cast<std::size_t>(q)] &&
             dm.g_cams[static_cast<std::size_t>(j)] == dm.q_cams[static_cast<std::size_t>(q)]);
}

// Admissible gallery indices for query q, ascending distance, ties by index.
inline std::vector<int> ranked_gallery(const DistMatrix& dm, int q, bool cam_filter) {
    std::vector<int> order;
    for (int j = 0; j < dm.gallery(); ++j)
        if (gallery_admissible(dm, q, j, cam_filter)) order.push_back(j);
    std::stable_sort(order.begin(), order.end(),
                     [&](int a, int b) { return dm.d.at2(q, a) < dm.d.at2(q, b); });
    return order;
}

inline void check_labels(const DistMatrix& dm) {
    require(static_cast<int>(dm.q_ids.size()) == dm.queries() &&
                static_cast<int>(dm.g_ids.size()) == dm.gallery(),
            "metric: identity labels missing");
    require(dm.queries() > 0 && dm.gallery() > 0, "metric: empty distance matrix");
}

}  // namespace detail

// Queries whose admissible gallery holds no same-identity item; these are
// skipped by the metric averages but surfaced in reports.
inline int count_queries_without_match(const DistMatrix& dm, bool cam_filter) {
    detail::check_labels(dm);
    int n = 0;
    for (int q = 0; q < dm.queries(); ++q) {
        bool any = false;
        for (int j = 0; j < dm.gallery() && !any; ++j)
            if (detail::gallery_admissible(dm, q, j, cam_filter) &&
                dm.g_ids[static_cast<std::size_t>(j)] == dm.q_ids[static_cast<std::size_t>(q)])
                any = true;
        if (!any) ++n;
    }
    return n;
}

inline double cmc_rank_k(const DistMatrix& dm, int k, bool cam_filter) {
    detail::check_labels(dm);
    require(k >= 1, "cmc_rank_k: k must be >= 1");
    int used = 0, hits = 0;
    for (int q = 0; q < dm.queries(); ++q) {
        std::vector<int> order = detail::ranked_gallery(dm, q, cam_filter);
        bool any = false, hit = false;
        for (std::size_t r = 0; r < order.size(); ++r) {
            bool match = dm.g_ids[static_cast<std::size_t>(order[r])] == dm.q_ids[static_cast<std::size_t>(q)];
            any = any || match;
            if (match && static_cast<int>(r) < k) hit = true;
        }
        if (!any) continue;
        ++used;
        if (hit) ++hits;
    }
    require(used > 0, "cmc_rank_k: no query has a valid gallery match");
    return static_cast<double>(hits) / used;
}

inline double mean_average_precision(const DistMatrix& dm, bool cam_filter) {
    detail::check_labels(dm);
    int used = 0;
    double total = 0;
    for (int q = 0; q < dm.queries(); ++q) {
        std::vector<int> order = detail::ranked_gallery(dm, q, cam_filter);
        int relevant_seen = 0;
        double ap = 0;
        for (std::size_t r = 0; r < order.size(); ++r) {
            if (dm.g_ids[static_cast<std::size_t>(order[r])] != dm.q_ids[static_cast<std::size_t>(q)]) continue;
            ++relevant_seen;
            ap += static_cast<double>(relevant_seen) / static_cast<double>(r + 1);
        }
        if (relevant_seen == 0) continue;
        ++used;
        total += ap / relevant_seen;
    }
    require(used > 0, "mean_average_precision: no query has a valid gallery match");
    return total / used;
}

struct EvalOptions {
    bool cam_filter = false;
    bool use_mask = false;
    const EmbedderHandle* f_surrogate = nullptr;
    double mask_margin = 1.0;
    std::string config_hash;
};

namespace detail {

inline DistMatrix dist_matrix_for(const EmbedderHandle& f, const Tensor& query_images, const Dataset& query,
                                  const Dataset& gallery, const Tensor& gallery_feats) {
    Tensor qf = f.embed(query_images);
    DistMatrix dm = pairwise_distances(qf, gallery_feats);
    for (const Sample& s : query.samples) {
        dm.q_ids.push_back(s.identity);
        dm.q_cams.push_back(s.camera);
    }
    for (const Sample& s : gallery.samples) {
        dm.g_ids.push_back(s.identity);
        dm.g_cams.push_back(s.camera);
    }
    bool cams_known = true;
    for (int c : dm.q_cams) cams_known = cams_known && c != kAbsent;
    for (int c : dm.g_cams) cams_known = cams_known && c != kAbsent;
    if (!cams_known) {
        dm.q_cams.clear();
        dm.g_cams.clear();
    }
    return dm;
}

inline std::string iso_timestamp() {
    std::time_t now = std::time(nullptr);
    char buf[32];
    std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&now));
    return buf;
}

}  // namespace detail

inline Tensor all_images(const Dataset& ds) {
    std::vector<int> idx(ds.samples.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = static_cast<int>(i);
    return batch_from_indices(ds, idx).images;
}

// Before/after retrieval metrics for one target model. The attack touches
// queries only; the gallery is always indexed clean.
inline EvalReport evaluate_attack(const EmbedderHandle& f_target, const Generator* gen, const AttackBudget& budget,
                                  const Dataset& query, const Dataset& gallery, const EvalOptions& opt = {}) {
    require(!query.samples.empty(), "evaluate_attack: empty query set");
    require(!gallery.samples.empty(), "evaluate_attack: empty gallery");

    Tensor q_images = all_images(query);
    Tensor g_feats = f_target.embed(all_images(gallery));

    EvalReport rep;
    rep.target_model = f_target.name;
    rep.dataset = query.name;
    rep.config_hash = opt.config_hash;
    rep.timestamp = detail::iso_timestamp();
    rep.queries = static_cast<int>(query.samples.size());

    DistMatrix before = detail::dist_matrix_for(f_target, q_images, query, gallery, g_feats);
    rep.queries_without_match = count_queries_without_match(before, opt.cam_filter);
    rep.map_before = mean_average_precision(before, opt.cam_filter);
    rep.r1_before = cmc_rank_k(before, 1, opt.cam_filter);
    rep.r10_before = cmc_rank_k(before, 10, opt.cam_filter);

    if (gen != nullptr) {
        Tensor q_adv = attack(*gen, q_images, budget, opt.use_mask, opt.f_surrogate, opt.mask_margin);
        DistMatrix after = detail::dist_matrix_for(f_target, q_adv, query, gallery, g_feats);
        rep.has_after = true;
        rep.map_after = mean_average_precision(after, opt.cam_filter);
        rep.r1_after = cmc_rank_k(after, 1, opt.cam_filter);
        rep.r10_after = cmc_rank_k(after, 10, opt.cam_filter);
    }
    return rep;
}

inline void print_report(const EvalReport& rep, std::ostream& os) {
    auto pct = [](double v) {
        char buf[32];
        std::snprintf(buf, sizeof(buf), "%6.2f", 100.0 * v);
        return std::string(buf);
    };
    os << "target=" << rep.target_model << " dataset=" << rep.dataset << " queries=" << rep.queries;
    if (rep.queries_without_match > 0) os << " (no-match: " << rep.queries_without_match << ")";
    os << "\n";
    os << "          mAP%    R-1%   R-10%\n";
    os << "  before " << pct(rep.map_before) << "  " << pct(rep.r1_before) << "  " << pct(rep.r10_before) << "\n";
    if (rep.has_after)
        os << "  after  " << pct(rep.map_after) << "  " << pct(rep.r1_after) << "  " << pct(rep.r10_after) << "\n";
}

inline nlohmann::json report_record(const EvalReport& rep) {
    nlohmann::json j;
    j["target_model"] = rep.target_model;
    j["dataset"] = rep.dataset;
    j["queries"] = rep.queries;
    j["queries_without_match"] = rep.queries_without_match;
    j["mAP_before"] = rep.map_before;
    j["r1_before"] = rep.r1_before;
    j["r10_before"] = rep.r10_before;
    if (rep.has_after) {
        j["mAP_after"] = rep.map_after;
        j["r1_after"] = rep.r1_after;
        j["r10_after"] = rep.r10_after;
    }
    j["config_hash"] = rep.config_hash;
    j["timestamp"] = rep.timestamp;
    return j;
}

// One JSON line per model x dataset cell.
inline void append_report_record(const std::string& path, const EvalReport& rep) {
    std::ofstream out(path, std::ios::app);
    require(out.good(), "cannot open report file: " + path);
    out << report_record(rep).dump() << "\n";
    require(out.good(), "cannot write report file: " + path);
}

// Horizontal strip: query (blue) followed by its top-k gallery hits, green
// when the identity matches and red otherwise.
inline void render_retrieval_grid(const Sample& query, const std::vector<double>& dm_row, const Dataset& gallery,
                                  int k, const std::string& out_path) {
    require(k >= 1, "render_retrieval_grid: k must be >= 1");
    require(static_cast<std::size_t>(k) <= gallery.samples.size(), "render_retrieval_grid: k exceeds gallery size");
    require(dm_row.size() == gallery.samples.size(), "render_retrieval_grid: row length mismatch");
    std::vector<int> order(gallery.samples.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
        return dm_row[static_cast<std::size_t>(a)] < dm_row[static_cast<std::size_t>(b)];
    });
    std::vector<std::pair<Tensor, BorderColor>> cells;
    cells.emplace_back(query.image, BorderColor::blue);
    for (int r = 0; r < k; ++r) {
        const Sample& g = gallery.samples[static_cast<std::size_t>(order[static_cast<std::size_t>(r)])];
        cells.emplace_back(g.image, g.identity == query.identity ? BorderColor::green : BorderColor::red);
    }
    save_image_strip(out_path, cells);
}

}  // namespace mega

#endif
