#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "fuseloc/network.hpp"
#include "fuseloc/optim.hpp"
#include "fuseloc/rng.hpp"

// Triplet metric learning: pose-thresholded tuple mining and the hinge loss
// over global-descriptor distances, plus the deterministic training loop.

namespace fuseloc {

struct TripletTuple {
    int query_id = 0;
    int positive_id = 0;
    int negative_id = 0;
};

struct PoseEntry {
    int id = 0;
    std::array<double, 3> xyz{};
};

inline double pose_distance(const std::array<double, 3>& a, const std::array<double, 3>& b) {
    const double dx = a[0] - b[0], dy = a[1] - b[1], dz = a[2] - b[2];
    return std::sqrt(dx * dx + dy * dy + dz * dz);
}

// ---------------------------------------------------------------------------
// hinge loss over Euclidean descriptor distances
// ---------------------------------------------------------------------------

template <typename T>
double descriptor_distance(const Tensor<T>& a, const Tensor<T>& b) {
    if (!a.same_shape(b))
        throw ContractError("metric", "descriptor shapes differ: " + a.shape_string() + " vs " + b.shape_string());
    double acc = 0.0;
    for (std::int64_t i = 0; i < a.numel(); ++i) {
        const double d = static_cast<double>(a[i]) - static_cast<double>(b[i]);
        acc += d * d;
    }
    return std::sqrt(acc);
}

template <typename T>
T triplet_loss(const Tensor<T>& q, const Tensor<T>& p, const Tensor<T>& n, T margin) {
    const double loss = static_cast<double>(margin) + descriptor_distance(q, p) - descriptor_distance(q, n);
    return loss > 0.0 ? static_cast<T>(loss) : T(0);
}

// Accumulates (+=) gradients of the loss into dq/dp/dn; returns the loss.
// The hinge gates everything: an inactive tuple contributes no gradient.
template <typename T>
T triplet_loss_backward(const Tensor<T>& q, const Tensor<T>& p, const Tensor<T>& n, T margin, T upstream,
                        Tensor<T>& dq, Tensor<T>& dp, Tensor<T>& dn) {
    const double dqp = descriptor_distance(q, p);
    const double dqn = descriptor_distance(q, n);
    const double loss = static_cast<double>(margin) + dqp - dqn;
    if (loss <= 0.0) return T(0);
    if (dqp > 0.0) {
        const T inv = static_cast<T>(1.0 / dqp) * upstream;
        for (std::int64_t i = 0; i < q.numel(); ++i) {
            const T d = (q[i] - p[i]) * inv;
            dq[i] += d;
            dp[i] -= d;
        }
    }
    if (dqn > 0.0) {
        const T inv = static_cast<T>(1.0 / dqn) * upstream;
        for (std::int64_t i = 0; i < q.numel(); ++i) {
            const T d = (q[i] - n[i]) * inv;
            dq[i] -= d;
            dn[i] += d;
        }
    }
    return static_cast<T>(loss);
}

// ---------------------------------------------------------------------------
// tuple mining
// ---------------------------------------------------------------------------

// Draws `count` tuples: query uniform over entries that own at least one
// positive (<= d_pos, self excluded) and one negative (>= d_neg); positive
// and negative uniform over their candidate sets. One positive and one
// negative per tuple keeps the two sample populations equal by construction.
inline std::vector<TripletTuple> mine_triplets(const std::vector<PoseEntry>& poses, double d_pos,
                                               double d_neg, std::uint64_t seed, int count) {
    if (!(d_pos > 0.0) || !(d_neg > d_pos))
        throw ContractError("metric", "mining thresholds must satisfy 0 < d_pos < d_neg");
    if (count < 1) throw ContractError("metric", "mining count must be positive");
    const int n = static_cast<int>(poses.size());
    std::vector<std::vector<int>> positives(static_cast<std::size_t>(n));
    std::vector<std::vector<int>> negatives(static_cast<std::size_t>(n));
    double min_pair = std::numeric_limits<double>::infinity();
    double max_pair = 0.0;
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j) {
            if (i == j) continue;
            const double d = pose_distance(poses[static_cast<std::size_t>(i)].xyz,
                                           poses[static_cast<std::size_t>(j)].xyz);
            if (j > i) {
                min_pair = std::min(min_pair, d);
                max_pair = std::max(max_pair, d);
            }
            if (d <= d_pos) positives[static_cast<std::size_t>(i)].push_back(j);
            if (d >= d_neg) negatives[static_cast<std::size_t>(i)].push_back(j);
        }
    std::vector<int> eligible;
    for (int i = 0; i < n; ++i)
        if (!positives[static_cast<std::size_t>(i)].empty() && !negatives[static_cast<std::size_t>(i)].empty())
            eligible.push_back(i);
    if (eligible.empty())
        throw ContractError("metric",
                            "mining failed: no query with both a positive (<=" + std::to_string(d_pos) +
                                " m) and a negative (>=" + std::to_string(d_neg) +
                                " m); pairwise distances span [" + std::to_string(min_pair) + ", " +
                                std::to_string(max_pair) + "] m");
    Rng rng(seed);
    std::vector<TripletTuple> tuples;
    tuples.reserve(static_cast<std::size_t>(count));
    for (int t = 0; t < count; ++t) {
        const int qi = eligible[static_cast<std::size_t>(rng.uniform_int(eligible.size()))];
        const auto& pos = positives[static_cast<std::size_t>(qi)];
        const auto& neg = negatives[static_cast<std::size_t>(qi)];
        TripletTuple tuple;
        tuple.query_id = poses[static_cast<std::size_t>(qi)].id;
        tuple.positive_id = poses[pos[static_cast<std::size_t>(rng.uniform_int(pos.size()))]].id;
        tuple.negative_id = poses[neg[static_cast<std::size_t>(rng.uniform_int(neg.size()))]].id;
        tuples.push_back(tuple);
    }
    return tuples;
}

// ---------------------------------------------------------------------------
// training loop
// ---------------------------------------------------------------------------

struct TrainConfig {
    int batch_size = 16;
    double lr = 1e-4;
    double momentum = 0.5;
    double weight_decay = 5e-4;
    double margin = 0.5;
    double d_pos = 5.0;
    double d_neg = 50.0;
    int epochs = 0;   // passes over the mined tuple list; used when steps == 0
    int steps = 200;  // total optimizer steps
    int tuples = 20;
    std::uint64_t seed = 0;

    void validate() const {
        if (batch_size < 1) throw ContractError("metric", "batch_size must be positive");
        if (!(lr > 0.0)) throw ContractError("metric", "lr must be positive");
        if (!(margin > 0.0)) throw ContractError("metric", "margin must be positive");
        if (!(d_pos > 0.0 && d_pos < d_neg)) throw ContractError("metric", "need 0 < d_pos < d_neg");
        if (steps < 0 || epochs < 0) throw ContractError("metric", "steps/epochs must be non-negative");
        if (tuples < 1) throw ContractError("metric", "tuples must be positive");
    }

    int total_steps() const {
        if (steps > 0) return steps;
        const int per_epoch = (tuples + batch_size - 1) / batch_size;
        return epochs * per_epoch;
    }
};

struct TrainSample {
    Tensor<float> image;
    Tensor<float> cloud;
};

struct TrainResult {
    std::vector<double> loss_history;  // mean batch loss per step
};

// Deterministic single-threaded training. Tuples reference indices into
// `samples`. Each step forwards every distinct batch member once, applies the
// mean hinge loss over the batch, and takes one SGD step.
inline TrainResult train(const ThreeBranchNetwork<float>& net, ParameterTable<float>& params,
                         const std::vector<TrainSample>& samples, const std::vector<TripletTuple>& tuples,
                         const TrainConfig& cfg) {
    cfg.validate();
    if (tuples.empty()) throw ContractError("metric", "no tuples to train on");
    for (const auto& t : tuples)
        for (int id : {t.query_id, t.positive_id, t.negative_id})
            if (id < 0 || id >= static_cast<int>(samples.size()))
                throw ContractError("metric", "tuple references unknown sample " + std::to_string(id));

    std::vector<SampleCache> caches(samples.size());
    std::vector<bool> cache_ready(samples.size(), false);
    Rng rng(mix_seed(cfg.seed, 0x7261696e));  // batch order stream
    std::vector<int> order(tuples.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
    auto reshuffle = [&]() {
        for (std::size_t i = order.size(); i > 1; --i) {
            const std::size_t j = static_cast<std::size_t>(rng.uniform_int(i));
            std::swap(order[i - 1], order[j]);
        }
    };
    reshuffle();
    std::size_t cursor = 0;

    TrainResult result;
    ParameterTable<float> grads;
    const int total = cfg.total_steps();
    for (int step = 0; step < total; ++step) {
        // next batch of tuples from the shuffled cyclic stream
        std::vector<TripletTuple> batch;
        batch.reserve(static_cast<std::size_t>(cfg.batch_size));
        for (int b = 0; b < cfg.batch_size; ++b) {
            if (cursor == order.size()) {
                reshuffle();
                cursor = 0;
            }
            batch.push_back(tuples[static_cast<std::size_t>(order[cursor++])]);
        }
        // distinct batch members, first-use order
        std::vector<int> members;
        std::vector<int> member_of(samples.size(), -1);
        for (const auto& t : batch)
            for (int id : {t.query_id, t.positive_id, t.negative_id})
                if (member_of[static_cast<std::size_t>(id)] < 0) {
                    member_of[static_cast<std::size_t>(id)] = static_cast<int>(members.size());
                    members.push_back(id);
                }
        // forward every member once
        std::vector<NetworkTrace<float>> traces(members.size());
        std::vector<Tensor<float>> descriptors(members.size());
        for (std::size_t m = 0; m < members.size(); ++m) {
            const int id = members[m];
            if (!cache_ready[static_cast<std::size_t>(id)]) {
                net.build_cache(samples[static_cast<std::size_t>(id)].cloud,
                                &caches[static_cast<std::size_t>(id)]);
                cache_ready[static_cast<std::size_t>(id)] = true;
            }
            descriptors[m] = net.forward(samples[static_cast<std::size_t>(id)].image,
                                         samples[static_cast<std::size_t>(id)].cloud, params, Mode::kTrain,
                                         &traces[m], &caches[static_cast<std::size_t>(id)]);
            net.update_running(traces[m], params);
        }
        // mean batch loss and descriptor gradients
        std::vector<Tensor<float>> desc_grads(members.size(), Tensor<float>({3 * net.cfg.vlad.out_dim}));
        const float upstream = 1.0f / static_cast<float>(cfg.batch_size);
        double loss_sum = 0.0;
        for (const auto& t : batch) {
            const int mq = member_of[static_cast<std::size_t>(t.query_id)];
            const int mp = member_of[static_cast<std::size_t>(t.positive_id)];
            const int mn = member_of[static_cast<std::size_t>(t.negative_id)];
            loss_sum += triplet_loss_backward(descriptors[static_cast<std::size_t>(mq)],
                                              descriptors[static_cast<std::size_t>(mp)],
                                              descriptors[static_cast<std::size_t>(mn)],
                                              static_cast<float>(cfg.margin), upstream,
                                              desc_grads[static_cast<std::size_t>(mq)],
                                              desc_grads[static_cast<std::size_t>(mp)],
                                              desc_grads[static_cast<std::size_t>(mn)]);
        }
        const double mean_loss = loss_sum / cfg.batch_size;
        if (!std::isfinite(mean_loss)) {
            std::string where = "loss";
            for (const auto& e : params.entries())
                if (!e.value.all_finite()) {
                    where = "parameter '" + e.path + "'";
                    break;
                }
            throw ContractError("metric", "non-finite loss at step " + std::to_string(step) +
                                              " (first non-finite: " + where + ")");
        }
        // backward every member whose descriptor gradient is non-zero (the
        // backward pass is linear in the upstream gradient, so an all-zero
        // gradient contributes exactly nothing), then one optimizer step
        grads.zero_values();
        for (const auto& e : params.entries())
            if (e.trainable) grads.accum(e.path, e.value.shape());
        for (std::size_t m = 0; m < members.size(); ++m) {
            bool live = false;
            for (std::int64_t i = 0; i < desc_grads[m].numel() && !live; ++i)
                live = desc_grads[m][i] != 0.0f;
            if (live) net.backward(traces[m], desc_grads[m], params, Mode::kTrain, grads);
        }
        sgd_momentum_step(params, grads, static_cast<float>(cfg.lr), static_cast<float>(cfg.momentum),
                          static_cast<float>(cfg.weight_decay));
        result.loss_history.push_back(mean_loss);
    }
    return result;
}

}  // namespace fuseloc
