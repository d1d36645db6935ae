#include "fuseloc/evalkit.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "fuseloc/metric.hpp"
#include "fuseloc/network.hpp"

namespace fuseloc {

BranchMask BranchMask::parse(const std::string& spec) {
    BranchMask m{false, false, false};
    std::stringstream ss(spec);
    std::string tok;
    while (std::getline(ss, tok, ',')) {
        if (tok == "img" || tok == "image") m.img = true;
        else if (tok == "pc" || tok == "point" || tok == "lidar") m.pc = true;
        else if (tok == "fus" || tok == "fusion") m.fus = true;
        else throw ContractError("evalkit", "unknown branch '" + tok + "' (expected img, pc, fusion)");
    }
    if (!m.img && !m.pc && !m.fus)
        throw ContractError("evalkit", "branch mask selects no segments");
    return m;
}

std::string BranchMask::describe() const {
    std::string s;
    if (img) s += "img,";
    if (pc) s += "pc,";
    if (fus) s += "fusion,";
    s.pop_back();
    return s;
}

DescriptorDB build_db(const std::string& descriptor_path, const std::vector<PoseRecord>& poses) {
    DescriptorDB db;
    db.matrix = load_descriptors(descriptor_path);
    if (db.matrix.dim(1) != kGlobalDescriptorDim)
        throw FormatError("evalkit", "descriptor dim " + std::to_string(db.matrix.dim(1)) +
                                         " in '" + descriptor_path + "', expected " +
                                         std::to_string(kGlobalDescriptorDim));
    if (static_cast<std::size_t>(db.matrix.dim(0)) != poses.size())
        throw FormatError("evalkit", "count mismatch: " + std::to_string(db.matrix.dim(0)) +
                                         " descriptors vs " + std::to_string(poses.size()) + " poses");
    for (const auto& r : poses) {
        db.ids.push_back(r.id);
        db.poses.push_back(r.xyz);
    }
    return db;
}

namespace {

double masked_distance(const float* a, const float* b, const BranchMask& mask) {
    double acc = 0.0;
    const bool segs[3] = {mask.img, mask.pc, mask.fus};
    for (int s = 0; s < 3; ++s) {
        if (!segs[s]) continue;
        const int off = s * kSubDescriptorDim;
        for (int i = 0; i < kSubDescriptorDim; ++i) {
            const double d = static_cast<double>(a[off + i]) - static_cast<double>(b[off + i]);
            acc += d * d;
        }
    }
    return std::sqrt(acc);
}

}  // namespace

std::pair<int, double> query_nn(const DescriptorDB& db, const float* query, const BranchMask& mask,
                                int exclude_id) {
    if (db.count() == 0) throw ContractError("evalkit", "query against empty database");
    int best_id = -1;
    double best = 0.0;
    for (int i = 0; i < db.count(); ++i) {
        const int id = db.ids[static_cast<std::size_t>(i)];
        if (id == exclude_id) continue;
        const double d = masked_distance(db.matrix.data() + static_cast<std::int64_t>(i) * kGlobalDescriptorDim,
                                         query, mask);
        if (best_id < 0 || d < best || (d == best && id < best_id)) {
            best = d;
            best_id = id;
        }
    }
    if (best_id < 0) throw ContractError("evalkit", "database holds only the excluded entry");
    return {best_id, best};
}

PRResult pr_curve(const DescriptorDB& db, const DescriptorDB& queries, double d_pos,
                  std::vector<double> thresholds, const BranchMask& mask) {
    if (!(d_pos > 0.0)) throw ContractError("evalkit", "d_pos must be positive");
    struct Top1 {
        double dist;
        bool correct;
    };
    std::vector<Top1> hits;
    for (int qi = 0; qi < queries.count(); ++qi) {
        const int qid = queries.ids[static_cast<std::size_t>(qi)];
        const auto& qpose = queries.poses[static_cast<std::size_t>(qi)];
        bool has_loop = false;
        for (int di = 0; di < db.count(); ++di) {
            if (db.ids[static_cast<std::size_t>(di)] == qid) continue;  // self
            if (pose_distance(db.poses[static_cast<std::size_t>(di)], qpose) <= d_pos) {
                has_loop = true;
                break;
            }
        }
        if (!has_loop) continue;  // not part of the evaluation
        auto [best_id, dist] =
            query_nn(db, queries.matrix.data() + static_cast<std::int64_t>(qi) * kGlobalDescriptorDim, mask, qid);
        std::size_t bi = 0;
        while (db.ids[bi] != best_id) ++bi;
        hits.push_back({dist, pose_distance(db.poses[bi], qpose) <= d_pos});
    }
    if (hits.empty())
        throw ContractError("evalkit", "no query has a ground-truth loop within " + std::to_string(d_pos) + " m");

    if (thresholds.empty()) {
        for (const auto& h : hits) thresholds.push_back(h.dist);
        std::sort(thresholds.begin(), thresholds.end());
        thresholds.erase(std::unique(thresholds.begin(), thresholds.end()), thresholds.end());
    } else {
        std::sort(thresholds.begin(), thresholds.end());
    }

    PRResult pr;
    pr.thresholds = thresholds;
    const double n_gt = static_cast<double>(hits.size());
    for (const double tau : thresholds) {
        int tp = 0, fp = 0;
        for (const auto& h : hits) {
            if (h.dist > tau) continue;
            if (h.correct) ++tp;
            else ++fp;
        }
        const double precision = tp + fp > 0 ? static_cast<double>(tp) / (tp + fp) : 1.0;
        const double recall = static_cast<double>(tp) / n_gt;
        pr.precision.push_back(precision);
        pr.recall.push_back(recall);
        const double f1 = precision + recall > 0.0 ? 2.0 * precision * recall / (precision + recall) : 0.0;
        pr.max_f1 = std::max(pr.max_f1, f1);
        if (tp > 0 && fp == 0) pr.recall_at_p100 = std::max(pr.recall_at_p100, recall);
    }
    return pr;
}

namespace {

std::string shortest(double v) {
    char buf[32];
    auto res = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, res.ptr);
}

}  // namespace

void export_results(const PRResult& pr, const std::string& path_prefix) {
    if (pr.thresholds.empty()) throw ContractError("evalkit", "cannot export an empty threshold sweep");
    {
        std::ofstream os(path_prefix + ".csv", std::ios::trunc);
        if (!os) throw IoError("evalkit", "cannot open '" + path_prefix + ".csv' for writing");
        os << "threshold,precision,recall\n";
        for (std::size_t i = 0; i < pr.thresholds.size(); ++i)
            os << shortest(pr.thresholds[i]) << "," << shortest(pr.precision[i]) << ","
               << shortest(pr.recall[i]) << "\n";
        if (!os) throw IoError("evalkit", "write failed for '" + path_prefix + ".csv'");
    }
    {
        nlohmann::ordered_json j;
        j["max_f1"] = pr.max_f1;
        j["recall_at_p100"] = pr.recall_at_p100;
        std::ofstream os(path_prefix + ".json", std::ios::trunc);
        if (!os) throw IoError("evalkit", "cannot open '" + path_prefix + ".json' for writing");
        os << j.dump(2) << "\n";
        if (!os) throw IoError("evalkit", "write failed for '" + path_prefix + ".json'");
    }
}

}  // namespace fuseloc
