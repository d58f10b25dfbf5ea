#include <catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "mega/retrieval_eval.hpp"

using namespace mega;
namespace fs = std::filesystem;

namespace {

DistMatrix dm_from(const std::vector<std::vector<double>>& rows, std::vector<int> q_ids, std::vector<int> g_ids,
                   std::vector<int> q_cams = {}, std::vector<int> g_cams = {}) {
    DistMatrix dm;
    int Q = static_cast<int>(rows.size()), G = static_cast<int>(rows[0].size());
    dm.d = Tensor({Q, G});
    for (int i = 0; i < Q; ++i)
        for (int j = 0; j < G; ++j) dm.d.at2(i, j) = rows[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)];
    dm.q_ids = std::move(q_ids);
    dm.g_ids = std::move(g_ids);
    dm.q_cams = std::move(q_cams);
    dm.g_cams = std::move(g_cams);
    return dm;
}

// Independent metric oracle: explicit (distance, index) sort and rank walk.
struct OracleResult {
    double map = 0;
    std::vector<double> cmc;  // index k-1 -> rank-k rate
    int skipped = 0;
};

OracleResult oracle_metrics(const DistMatrix& dm, bool cam_filter, int max_k) {
    OracleResult res;
    res.cmc.assign(static_cast<std::size_t>(max_k), 0.0);
    int used = 0;
    for (int q = 0; q < dm.queries(); ++q) {
        std::vector<std::pair<double, int>> order;
        for (int j = 0; j < dm.gallery(); ++j) {
            if (cam_filter && dm.has_cams() && dm.g_ids[static_cast<std::size_t>(j)] == dm.q_ids[static_cast<std::size_t>(q)] &&
                dm.g_cams[static_cast<std::size_t>(j)] == dm.q_cams[static_cast<std::size_t>(q)])
                continue;
            order.emplace_back(dm.d.at2(q, j), j);
        }
        std::sort(order.begin(), order.end());
        std::vector<int> match_ranks;  // 1-based
        for (std::size_t r = 0; r < order.size(); ++r)
            if (dm.g_ids[static_cast<std::size_t>(order[r].second)] == dm.q_ids[static_cast<std::size_t>(q)])
                match_ranks.push_back(static_cast<int>(r) + 1);
        if (match_ranks.empty()) {
            ++res.skipped;
            continue;
        }
        ++used;
        double ap = 0;
        for (std::size_t m = 0; m < match_ranks.size(); ++m)
            ap += static_cast<double>(m + 1) / match_ranks[m];
        res.map += ap / static_cast<double>(match_ranks.size());
        for (int k = 1; k <= max_k; ++k)
            if (match_ranks.front() <= k) res.cmc[static_cast<std::size_t>(k - 1)] += 1.0;
    }
    res.map /= used;
    for (double& v : res.cmc) v /= used;
    return res;
}

}  // namespace

TEST_CASE("pairwise distances") {
    Tensor a({1, 2}), b({1, 2});
    a.data = {0.7, -0.3};
    b.data = {0.7, -0.3};
    REQUIRE(pairwise_distances(a, b).d.at2(0, 0) == 0.0);

    Tensor q({1, 2}), g({1, 2});
    q.data = {0.0, 0.0};
    g.data = {3.0, 4.0};
    REQUIRE(pairwise_distances(q, g).d.at2(0, 0) == 5.0);

    Rng rng(71);
    Tensor qs({8, 16}), gs({12, 16});
    for (double& v : qs.data) v = rng.normal();
    for (double& v : gs.data) v = rng.normal();
    DistMatrix dm = pairwise_distances(qs, gs);
    for (int i = 0; i < 8; ++i)
        for (int j = 0; j < 12; ++j) {
            double s = 0;
            for (int k = 0; k < 16; ++k) {
                double t = qs.at2(i, k) - gs.at2(j, k);
                s += t * t;
            }
            REQUIRE_THAT(dm.d.at2(i, j), Catch::Matchers::WithinAbs(std::sqrt(s), 1e-6));
            REQUIRE(dm.d.at2(i, j) >= 0.0);
            REQUIRE(std::isfinite(dm.d.at2(i, j)));
        }

    Tensor bad({2, 7});
    REQUIRE_THROWS_AS(pairwise_distances(qs, bad), FatalError);
}

TEST_CASE("rank-k worked examples") {
    // true match nearest
    DistMatrix near = dm_from({{0.1, 0.4}}, {0}, {0, 1});
    REQUIRE(cmc_rank_k(near, 1, false) == 1.0);

    // true match exactly 2nd
    DistMatrix second = dm_from({{0.2, 0.1}}, {0}, {0, 1});
    REQUIRE(cmc_rank_k(second, 1, false) == 0.0);
    REQUIRE(cmc_rank_k(second, 10, false) == 1.0);

    REQUIRE_THROWS_AS(cmc_rank_k(near, 0, false), FatalError);
    DistMatrix unlabeled = dm_from({{0.1, 0.4}}, {}, {});
    REQUIRE_THROWS_AS(cmc_rank_k(unlabeled, 1, false), FatalError);
}

TEST_CASE("distance ties break toward the lower gallery index") {
    DistMatrix tie = dm_from({{0.5, 0.5}}, {0}, {1, 0});
    REQUIRE(cmc_rank_k(tie, 1, false) == 0.0);
    DistMatrix tie2 = dm_from({{0.5, 0.5}}, {0}, {0, 1});
    REQUIRE(cmc_rank_k(tie2, 1, false) == 1.0);
}

TEST_CASE("average precision worked examples") {
    // one relevant item ranked first of five
    DistMatrix first = dm_from({{0.1, 0.2, 0.3, 0.4, 0.5}}, {0}, {0, 1, 1, 1, 1});
    REQUIRE(mean_average_precision(first, false) == 1.0);

    // relevant at ranks 1 and 3
    DistMatrix two = dm_from({{0.1, 0.2, 0.3, 0.4, 0.5}}, {0}, {0, 1, 0, 1, 1});
    REQUIRE_THAT(mean_average_precision(two, false), Catch::Matchers::WithinAbs(5.0 / 6.0, 1e-12));
    REQUIRE_THAT(mean_average_precision(two, false), Catch::Matchers::WithinAbs(0.8333, 1e-4));
}

TEST_CASE("metrics match an exhaustive oracle on random instances") {
    Rng rng(73);
    int tested = 0;
    while (tested < 200) {
        int Q = 1 + rng.uniform_int(6), G = 2 + rng.uniform_int(7);
        DistMatrix dm;
        dm.d = Tensor({Q, G});
        for (double& v : dm.d.data) v = rng.uniform();
        for (int i = 0; i < Q; ++i) {
            dm.q_ids.push_back(rng.uniform_int(4));
            dm.q_cams.push_back(rng.uniform_int(3));
        }
        for (int j = 0; j < G; ++j) {
            dm.g_ids.push_back(rng.uniform_int(4));
            dm.g_cams.push_back(rng.uniform_int(3));
        }
        for (bool cam_filter : {false, true}) {
            if (count_queries_without_match(dm, cam_filter) == dm.queries()) continue;
            OracleResult oracle = oracle_metrics(dm, cam_filter, G);
            REQUIRE_THAT(mean_average_precision(dm, cam_filter), Catch::Matchers::WithinAbs(oracle.map, 1e-12));
            for (int k = 1; k <= G; ++k)
                REQUIRE_THAT(cmc_rank_k(dm, k, cam_filter),
                             Catch::Matchers::WithinAbs(oracle.cmc[static_cast<std::size_t>(k - 1)], 1e-12));
            REQUIRE(count_queries_without_match(dm, cam_filter) == oracle.skipped);
            ++tested;
        }
    }
}

TEST_CASE("camera filter drops same-identity same-camera gallery entries") {
    DistMatrix dm = dm_from({{0.01, 0.1, 0.2}}, {0}, {0, 1, 0}, {0}, {0, 1, 1});
    REQUIRE(cmc_rank_k(dm, 1, false) == 1.0);
    REQUIRE(cmc_rank_k(dm, 1, true) == 0.0);
    REQUIRE_THAT(mean_average_precision(dm, true), Catch::Matchers::WithinAbs(0.5, 1e-12));
    REQUIRE(cmc_rank_k(dm, 10, true) == 1.0);

    // filtering can leave a query with no admissible match at all
    DistMatrix gone = dm_from({{0.01, 0.1}, {0.3, 0.2}}, {0, 1}, {0, 1}, {0, 5}, {0, 1});
    REQUIRE(count_queries_without_match(gone, true) == 1);
    REQUIRE(cmc_rank_k(gone, 1, true) == 1.0);  // average over the surviving query only
}

TEST_CASE("camera filter is a no-op when no camera repeats an identity") {
    Rng rng(79);
    DistMatrix dm;
    int Q = 5, G = 7;
    dm.d = Tensor({Q, G});
    for (double& v : dm.d.data) v = rng.uniform();
    for (int i = 0; i < Q; ++i) {
        dm.q_ids.push_back(rng.uniform_int(3));
        dm.q_cams.push_back(100 + i);
    }
    for (int j = 0; j < G; ++j) {
        dm.g_ids.push_back(rng.uniform_int(3));
        dm.g_cams.push_back(j);
    }
    REQUIRE(mean_average_precision(dm, true) == mean_average_precision(dm, false));
    for (int k = 1; k <= G; ++k) REQUIRE(cmc_rank_k(dm, k, true) == cmc_rank_k(dm, k, false));
}

TEST_CASE("metrics are invariant under gallery permutation") {
    Rng rng(83);
    int Q = 4, G = 8;
    DistMatrix dm;
    dm.d = Tensor({Q, G});
    for (double& v : dm.d.data) v = rng.uniform();
    for (int i = 0; i < Q; ++i) dm.q_ids.push_back(rng.uniform_int(3));
    for (int j = 0; j < G; ++j) dm.g_ids.push_back(rng.uniform_int(3));

    std::vector<int> perm(static_cast<std::size_t>(G));
    for (int j = 0; j < G; ++j) perm[static_cast<std::size_t>(j)] = j;
    rng.shuffle(perm);
    DistMatrix pd;
    pd.d = Tensor({Q, G});
    for (int i = 0; i < Q; ++i)
        for (int j = 0; j < G; ++j) pd.d.at2(i, j) = dm.d.at2(i, perm[static_cast<std::size_t>(j)]);
    pd.q_ids = dm.q_ids;
    for (int j = 0; j < G; ++j) pd.g_ids.push_back(dm.g_ids[static_cast<std::size_t>(perm[static_cast<std::size_t>(j)])]);

    REQUIRE_THAT(mean_average_precision(pd, false),
                 Catch::Matchers::WithinAbs(mean_average_precision(dm, false), 1e-15));
    for (int k = 1; k <= G; ++k)
        REQUIRE_THAT(cmc_rank_k(pd, k, false), Catch::Matchers::WithinAbs(cmc_rank_k(dm, k, false), 1e-15));
}

TEST_CASE("evaluate_attack produces a clean-only report without a generator") {
    Dataset ds = generate_toy_dataset(4, 4, 16, 301);
    Dataset query = filter_split(ds, SplitRole::query), gallery = filter_split(ds, SplitRole::gallery);
    auto emb = std::make_shared<ToyEmbedder>(build_toy_embedder("A", 16, 302));
    EmbedderHandle f = make_handle(emb);
    EvalOptions opt;
    opt.config_hash = "cafe";
    EvalReport rep = evaluate_attack(f, nullptr, AttackBudget(16.0), query, gallery, opt);
    REQUIRE_FALSE(rep.has_after);
    REQUIRE(rep.queries == 4);
    REQUIRE(rep.queries_without_match == 0);
    REQUIRE(rep.target_model == "A");
    REQUIRE(rep.dataset == query.name);
    REQUIRE(rep.config_hash == "cafe");
    REQUIRE(rep.map_before >= 0.0);
    REQUIRE(rep.map_before <= 1.0);
    REQUIRE(rep.r1_before >= 0.0);
    REQUIRE(rep.r1_before <= 1.0);
    REQUIRE(rep.r10_before == 1.0);  // gallery of 8 with k=10 always hits

    Dataset empty;
    REQUIRE_THROWS_AS(evaluate_attack(f, nullptr, AttackBudget(16.0), empty, gallery, opt), FatalError);
    REQUIRE_THROWS_AS(evaluate_attack(f, nullptr, AttackBudget(16.0), query, empty, opt), FatalError);
}

TEST_CASE("a vanishing perturbation leaves the metrics in place") {
    Dataset ds = generate_toy_dataset(3, 4, 16, 303);
    Dataset query = filter_split(ds, SplitRole::query), gallery = filter_split(ds, SplitRole::gallery);
    auto emb = std::make_shared<ToyEmbedder>(build_toy_embedder("A", 16, 304));
    EmbedderHandle f = make_handle(emb);
    Rng grng(305);
    Generator gen(8, grng);
    EvalReport rep = evaluate_attack(f, &gen, AttackBudget(0.001), query, gallery);
    REQUIRE(rep.has_after);
    REQUIRE_THAT(rep.map_after, Catch::Matchers::WithinAbs(rep.map_before, 0.01));
    REQUIRE_THAT(rep.r1_after, Catch::Matchers::WithinAbs(rep.r1_before, 0.01));
    REQUIRE_THAT(rep.r10_after, Catch::Matchers::WithinAbs(rep.r10_before, 0.01));
}

TEST_CASE("evaluate_attack mutates nothing") {
    Dataset ds = generate_toy_dataset(3, 4, 16, 307);
    Dataset query = filter_split(ds, SplitRole::query), gallery = filter_split(ds, SplitRole::gallery);
    auto emb = std::make_shared<ToyEmbedder>(build_toy_embedder("B", 8, 308));
    EmbedderHandle f = make_handle(emb);
    Rng grng(309);
    Generator gen(8, grng);

    std::uint64_t f_hash = f.param_hash();
    std::uint64_t g_hash = hash_params(gen.named_params());
    std::uint64_t q_hash = hash_tensor(all_images(query));
    std::uint64_t gal_hash = hash_tensor(all_images(gallery));

    evaluate_attack(f, &gen, AttackBudget(16.0), query, gallery);

    REQUIRE(f.param_hash() == f_hash);
    REQUIRE(hash_params(gen.named_params()) == g_hash);
    REQUIRE(hash_tensor(all_images(query)) == q_hash);
    REQUIRE(hash_tensor(all_images(gallery)) == gal_hash);
}

TEST_CASE("report records round-trip through JSON lines") {
    EvalReport rep;
    rep.target_model = "A";
    rep.dataset = "toy/query";
    rep.queries = 4;
    rep.map_before = 0.75;
    rep.r1_before = 1.0;
    rep.r10_before = 1.0;
    nlohmann::json j = report_record(rep);
    REQUIRE(j["target_model"] == "A");
    REQUIRE_FALSE(j.contains("mAP_after"));

    rep.has_after = true;
    rep.map_after = 0.25;
    rep.r1_after = 0.5;
    rep.r10_after = 0.75;
    j = report_record(rep);
    REQUIRE(j["mAP_after"] == 0.25);
    REQUIRE(j["mAP_before"] == 0.75);

    fs::path dir = fs::temp_directory_path() / "mega_report_test";
    fs::create_directories(dir);
    std::string path = (dir / "records.jsonl").string();
    fs::remove(path);
    append_report_record(path, rep);
    append_report_record(path, rep);
    std::ifstream in(path);
    std::string line;
    int lines = 0;
    while (std::getline(in, line)) {
        nlohmann::json parsed = nlohmann::json::parse(line);
        REQUIRE(parsed["r1_after"] == 0.5);
        ++lines;
    }
    REQUIRE(lines == 2);
    fs::remove_all(dir);

    std::ostringstream table;
    print_report(rep, table);
    REQUIRE(table.str().find("before") != std::string::npos);
    REQUIRE(table.str().find("after") != std::string::npos);
    REQUIRE(table.str().find("75.00") != std::string::npos);
    REQUIRE(table.str().find("25.00") != std::string::npos);
}

TEST_CASE("retrieval grid colors borders by identity match") {
    Dataset ds = generate_toy_dataset(3, 4, 16, 311);
    Dataset gallery = filter_split(ds, SplitRole::gallery);
    Dataset query = filter_split(ds, SplitRole::query);
    const Sample& q = query.samples[0];

    auto count_color = [](const std::string& path, double r, double g, double b) {
        Tensor img = load_image_chw(path);
        REQUIRE(img.data.size() > 0);
        int H = img.shape.d[1], W = img.shape.d[2];
        int n = 0;
        for (int y = 0; y < H; ++y)
            for (int x = 0; x < W; ++x)
                if (std::abs(img.at3(0, y, x) - r) < 0.02 && std::abs(img.at3(1, y, x) - g) < 0.02 &&
                    std::abs(img.at3(2, y, x) - b) < 0.02)
                    ++n;
        return n;
    };

    fs::path dir = fs::temp_directory_path() / "mega_grid_test";
    fs::create_directories(dir);

    // distances hand-built so every retrieved image matches the query identity
    std::vector<double> row(gallery.samples.size());
    for (std::size_t j = 0; j < row.size(); ++j)
        row[j] = gallery.samples[j].identity == q.identity ? 0.1 + 0.01 * static_cast<double>(j) : 1.0;
    std::string all_good = (dir / "good.png").string();
    render_retrieval_grid(q, row, gallery, 2, all_good);
    REQUIRE(count_color(all_good, 0.0, 200.0 / 255.0, 0.0) > 0);      // green borders
    REQUIRE(count_color(all_good, 230.0 / 255.0, 0.0, 0.0) == 0);     // no red
    REQUIRE(count_color(all_good, 0.0, 64.0 / 255.0, 1.0) > 0);       // blue query border

    // reversed preferences: every retrieved image mismatches
    for (std::size_t j = 0; j < row.size(); ++j)
        row[j] = gallery.samples[j].identity == q.identity ? 1.0 : 0.1 + 0.01 * static_cast<double>(j);
    std::string all_bad = (dir / "bad.png").string();
    render_retrieval_grid(q, row, gallery, 2, all_bad);
    REQUIRE(count_color(all_bad, 230.0 / 255.0, 0.0, 0.0) > 0);
    REQUIRE(count_color(all_bad, 0.0, 200.0 / 255.0, 0.0) == 0);

    REQUIRE_THROWS_AS(render_retrieval_grid(q, row, gallery, static_cast<int>(gallery.samples.size()) + 1,
                                            (dir / "overflow.png").string()),
                      FatalError);
    REQUIRE_THROWS_AS(render_retrieval_grid(q, row, gallery, 2, "/nonexistent-dir/x.png"), FatalError);
    fs::remove_all(dir);
}
