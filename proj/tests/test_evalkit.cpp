#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "fuseloc/evalkit.hpp"
#include "fuseloc/network.hpp"
#include "fuseloc/rng.hpp"

using namespace fuseloc;
namespace fs = std::filesystem;

namespace {

fs::path scratch_dir(const char* name) {
    fs::path dir = fs::temp_directory_path() / "fuseloc_tests" / name;
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

Tensor<float> rand_descriptor(Rng& rng) {
    Tensor<float> d({kGlobalDescriptorDim});
    for (int s = 0; s < 3; ++s) {
        double n = 0.0;
        for (int i = 0; i < kSubDescriptorDim; ++i) {
            const float v = static_cast<float>(rng.normal());
            d[s * kSubDescriptorDim + i] = v;
            n += static_cast<double>(v) * v;
        }
        const float inv = static_cast<float>(1.0 / std::sqrt(n));
        for (int i = 0; i < kSubDescriptorDim; ++i) d[s * kSubDescriptorDim + i] *= inv;
    }
    return d;
}

// db whose descriptor i is e_i-like: easy distance control
DescriptorDB make_db(const std::vector<Tensor<float>>& descs, const std::vector<PoseRecord>& poses,
                     const char* name) {
    fs::path dir = scratch_dir(name);
    save_descriptors(descs, (dir / "d.fld").string());
    return build_db((dir / "d.fld").string(), poses);
}

}  // namespace

TEST_CASE("descriptor file round trip and header validation") {
    fs::path dir = scratch_dir("fld");
    Rng rng(1);
    std::vector<Tensor<float>> descs;
    for (int i = 0; i < 5; ++i) descs.push_back(rand_descriptor(rng));
    save_descriptors(descs, (dir / "x.fld").string());
    Tensor<float> m = load_descriptors((dir / "x.fld").string());
    REQUIRE(m.shape() == std::vector<int>{5, kGlobalDescriptorDim});
    for (int i = 0; i < 5; ++i)
        for (int j = 0; j < kGlobalDescriptorDim; ++j) CHECK(m(i, j) == descs[static_cast<std::size_t>(i)][j]);

    SUBCASE("build_db count mismatch names both counts") {
        std::vector<PoseRecord> poses(3);
        CHECK_THROWS_WITH_AS(build_db((dir / "x.fld").string(), poses), doctest::Contains("5"), FormatError);
    }
    SUBCASE("single descriptor db") {
        std::vector<PoseRecord> poses(1);
        poses[0].id = 7;
        save_descriptors({descs[0]}, (dir / "one.fld").string());
        DescriptorDB db = build_db((dir / "one.fld").string(), poses);
        CHECK(db.count() == 1);
        CHECK(db.ids[0] == 7);
    }
    SUBCASE("wrong dim is a format error") {
        std::vector<Tensor<float>> bad{Tensor<float>({100})};
        save_descriptors(bad, (dir / "bad.fld").string());
        std::vector<PoseRecord> poses(1);
        CHECK_THROWS_AS(build_db((dir / "bad.fld").string(), poses), FormatError);
    }
    SUBCASE("bad magic") {
        std::ofstream os(dir / "nomagic.fld", std::ios::binary);
        os << "XXXX1234";
        os.close();
        CHECK_THROWS_AS(load_descriptors((dir / "nomagic.fld").string()), FormatError);
    }
}

TEST_CASE("query_nn: exact match, tie-break, and brute-force oracle") {
    Rng rng(2);
    std::vector<Tensor<float>> descs;
    std::vector<PoseRecord> poses;
    for (int i = 0; i < 50; ++i) {
        descs.push_back(rand_descriptor(rng));
        PoseRecord r;
        r.id = i;
        poses.push_back(r);
    }
    DescriptorDB db = make_db(descs, poses, "nn");

    SUBCASE("query equal to a row returns that id at distance 0") {
        auto [id, dist] = query_nn(db, descs[17].data());
        CHECK(id == 17);
        CHECK(dist == 0.0);
    }
    SUBCASE("equidistant rows resolve to the lower id") {
        std::vector<Tensor<float>> two{descs[0], descs[0]};
        std::vector<PoseRecord> p2(2);
        p2[0].id = 4;
        p2[1].id = 9;
        DescriptorDB db2 = make_db(two, p2, "nn_tie");
        auto [id, dist] = query_nn(db2, descs[1].data());
        CHECK(id == 4);
    }
    SUBCASE("matches the brute-force sort over 20 random queries") {
        for (int q = 0; q < 20; ++q) {
            Tensor<float> query = rand_descriptor(rng);
            auto [id, dist] = query_nn(db, query.data());
            int best = -1;
            double bestd = 1e30;
            for (int i = 0; i < 50; ++i) {
                double acc = 0.0;
                for (int j = 0; j < kGlobalDescriptorDim; ++j) {
                    const double d = static_cast<double>(db.matrix(i, j)) - query[j];
                    acc += d * d;
                }
                acc = std::sqrt(acc);
                if (acc < bestd) {
                    bestd = acc;
                    best = i;
                }
            }
            CHECK(id == best);
            CHECK(dist == doctest::Approx(bestd));
        }
    }
    SUBCASE("empty db is a contract error") {
        DescriptorDB empty;
        Tensor<float> q = rand_descriptor(rng);
        CHECK_THROWS_AS(query_nn(empty, q.data()), ContractError);
    }
}

TEST_CASE("pr curve: hand-constructed three-query example") {
    // top-1 distances/correctness: correct@0.1, wrong@0.2, correct@0.3
    // build descriptors so the query's nearest db row sits at those distances
    std::vector<Tensor<float>> db_desc(4, Tensor<float>({kGlobalDescriptorDim}));
    db_desc[0][0] = 10.0f;   // target of q0 (correct)
    db_desc[1][10] = 20.0f;  // target of q1 (wrong pose)
    db_desc[2][20] = 30.0f;  // target of q2 (correct)
    db_desc[3][30] = 99.0f;  // decoy far from everything
    std::vector<PoseRecord> db_poses(4);
    for (int i = 0; i < 4; ++i) db_poses[static_cast<std::size_t>(i)].id = 100 + i;
    db_poses[0].xyz = {0, 0, 0};
    db_poses[1].xyz = {500, 0, 0};  // wrong place for q1
    db_poses[2].xyz = {1000, 0, 0};
    db_poses[3].xyz = {2000, 0, 0};

    std::vector<Tensor<float>> q_desc(3, Tensor<float>({kGlobalDescriptorDim}));
    q_desc[0] = db_desc[0];
    q_desc[0][1] = 0.1f;  // distance 0.1 to db row 0
    q_desc[1] = db_desc[1];
    q_desc[1][11] = 0.2f;  // distance 0.2 to db row 1
    q_desc[2] = db_desc[2];
    q_desc[2][21] = 0.3f;  // distance 0.3 to db row 2
    std::vector<PoseRecord> q_poses(3);
    for (int i = 0; i < 3; ++i) q_poses[static_cast<std::size_t>(i)].id = 200 + i;
    q_poses[0].xyz = {1, 0, 0};     // within 5 m of db 0
    q_poses[1].xyz = {1001, 0, 0};  // true place is db 2, but its top-1 is db 1
    q_poses[2].xyz = {1001, 1, 0};  // within 5 m of db 2

    DescriptorDB db = make_db(db_desc, db_poses, "pr_db");
    DescriptorDB queries = make_db(q_desc, q_poses, "pr_q");
    PRResult pr = pr_curve(db, queries, 5.0);
    CHECK(pr.max_f1 == doctest::Approx(2.0 / 3.0));
    CHECK(pr.recall_at_p100 == doctest::Approx(1.0 / 3.0));
    REQUIRE(pr.thresholds.size() == 3);
    CHECK(pr.precision[0] == doctest::Approx(1.0));
    CHECK(pr.recall[2] == doctest::Approx(2.0 / 3.0));
    // recall is non-decreasing in the threshold
    for (std::size_t i = 1; i < pr.recall.size(); ++i) CHECK(pr.recall[i] >= pr.recall[i - 1]);
}

TEST_CASE("pr curve: perfect separation gives max F1 and recall@P100 of 1") {
    Rng rng(5);
    std::vector<Tensor<float>> place(6);
    for (auto& d : place) d = rand_descriptor(rng);
    // db and query: same 6 places, query descriptors nearly identical
    std::vector<Tensor<float>> qd = place;
    for (auto& d : qd) d[0] += 1e-3f;
    std::vector<PoseRecord> dbp(6), qp(6);
    for (int i = 0; i < 6; ++i) {
        dbp[static_cast<std::size_t>(i)].id = i;
        dbp[static_cast<std::size_t>(i)].xyz = {100.0 * i, 0, 0};
        qp[static_cast<std::size_t>(i)].id = 50 + i;
        qp[static_cast<std::size_t>(i)].xyz = {100.0 * i, 1, 0};
    }
    DescriptorDB db = make_db(place, dbp, "sep_db");
    DescriptorDB queries = make_db(qd, qp, "sep_q");
    PRResult pr = pr_curve(db, queries, 5.0);
    CHECK(pr.max_f1 == doctest::Approx(1.0));
    CHECK(pr.recall_at_p100 == doctest::Approx(1.0));
}

TEST_CASE("pr curve: self-retrieval with revisit pairs and self-match exclusion") {
    Rng rng(6);
    // 4 places, 2 samples each; db == queries
    std::vector<Tensor<float>> descs;
    std::vector<PoseRecord> poses;
    for (int place = 0; place < 4; ++place) {
        Tensor<float> base = rand_descriptor(rng);
        for (int visit = 0; visit < 2; ++visit) {
            Tensor<float> d = base;
            d[5] += 0.01f * visit;
            descs.push_back(d);
            PoseRecord r;
            r.id = place * 2 + visit;
            r.xyz = {200.0 * place, 0, 0};
            poses.push_back(r);
        }
    }
    DescriptorDB db = make_db(descs, poses, "self");
    PRResult pr = pr_curve(db, db, 5.0);
    CHECK(pr.max_f1 == doctest::Approx(1.0));
}

TEST_CASE("pr curve: no ground-truth loop is an evaluation error") {
    Rng rng(7);
    std::vector<Tensor<float>> d1{rand_descriptor(rng)}, d2{rand_descriptor(rng)};
    std::vector<PoseRecord> p1(1), p2(1);
    p1[0].id = 0;
    p1[0].xyz = {0, 0, 0};
    p2[0].id = 1;
    p2[0].xyz = {1000, 0, 0};
    DescriptorDB db = make_db(d1, p1, "nogt_db");
    DescriptorDB q = make_db(d2, p2, "nogt_q");
    CHECK_THROWS_AS(pr_curve(db, q, 5.0), ContractError);
}

TEST_CASE("branch masks") {
    BranchMask m = BranchMask::parse("img,fusion");
    CHECK(m.img);
    CHECK(!m.pc);
    CHECK(m.fus);
    CHECK_THROWS_AS(BranchMask::parse("bogus"), ContractError);
    CHECK(BranchMask::parse("pc").describe() == "pc");

    // masking restricts the distance to the selected segments
    Tensor<float> a({kGlobalDescriptorDim}), b({kGlobalDescriptorDim});
    a[0] = 1.0f;               // img segment differs
    b[300] = 1.0f;             // pc segment differs
    std::vector<PoseRecord> poses(1);
    DescriptorDB db = make_db({a}, poses, "mask");
    auto [id_img, dist_img] = query_nn(db, b.data(), BranchMask{true, false, false});
    CHECK(dist_img == doctest::Approx(1.0));  // only the img difference counts
    auto [id_all, dist_all] = query_nn(db, b.data(), BranchMask{true, true, true});
    CHECK(dist_all == doctest::Approx(std::sqrt(2.0)));
}

TEST_CASE("export_results writes CSV and ordered JSON that round-trip") {
    fs::path dir = scratch_dir("export");
    PRResult pr;
    pr.thresholds = {0.25, 0.5};
    pr.precision = {1.0, 2.0 / 3.0};
    pr.recall = {0.5, 1.0};
    pr.max_f1 = 0.8;
    pr.recall_at_p100 = 0.5;
    export_results(pr, (dir / "out").string());

    std::ifstream csv(dir / "out.csv");
    std::string header;
    std::getline(csv, header);
    CHECK(header == "threshold,precision,recall");
    std::vector<double> ts, ps, rs;
    std::string line;
    while (std::getline(csv, line)) {
        std::replace(line.begin(), line.end(), ',', ' ');
        std::istringstream ss(line);
        double t, p, r;
        ss >> t >> p >> r;
        ts.push_back(t);
        ps.push_back(p);
        rs.push_back(r);
    }
    REQUIRE(ts.size() == 2);
    CHECK(ts[0] == pr.thresholds[0]);  // shortest round-trip formatting
    CHECK(ps[1] == pr.precision[1]);
    CHECK(rs[1] == pr.recall[1]);

    std::ifstream js(dir / "out.json");
    std::stringstream buf;
    buf << js.rdbuf();
    const std::string text = buf.str();
    CHECK(text.find("\"max_f1\"") < text.find("\"recall_at_p100\""));  // fixed key order

    PRResult empty;
    CHECK_THROWS_AS(export_results(empty, (dir / "none").string()), ContractError);
}
