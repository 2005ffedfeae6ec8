#pragma once

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <map>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "qdfl/network.hpp"
#include "qdfl/reid.hpp"

namespace qdfl {

struct TrainConfig {
    double alpha = 0.005;          // L2 weight on the classifier (0.001 for larger sets)
    double momentum = 0.9;
    double lr_initial = 0.01;
    double lr_min = 0.001;
    double lr_decay_factor = 0.1;
    std::size_t batch_size = 128;  // half positive-pair images, half negative-pair images
    double rotation_range = 3.0;   // degrees, uniform in [-range, +range]
    double mirror_probability = 0.5;
    double init_std = 0.01;
    std::size_t convergence_window = 200;
    double convergence_threshold = 0.01;  // relative improvement that counts as still converging
    std::size_t steps = 1000;             // per branch network
    std::uint64_t seed = 0;

    void validate() const;
};

// ---------------------------------------------------------------------------
// Objective
// ---------------------------------------------------------------------------

struct LossResult {
    double loss = 0.0;
    double data_loss = 0.0;
    Tensor4 grad_logits;  // (K, 1, 1, C): (softmax - onehot) / K
    Tensor4 grad_reg;     // alpha * W
};

/// Mean softmax cross-entropy over the K rows of logits plus (alpha/2)||W||^2.
/// labels are 0-based class indices.
LossResult softmax_l2_loss(const Tensor4& logits, std::span<const std::size_t> labels, const Tensor4& weights,
                           double alpha);

// ---------------------------------------------------------------------------
// Optimiser and schedule
// ---------------------------------------------------------------------------

struct OptimizerState {
    std::map<std::string, Tensor4> velocity;
    double lr = 0.01;
    std::size_t step = 0;
    std::vector<double> recent_losses;  // ring buffer of 2 * convergence_window entries
    std::size_t ring_head = 0;
    std::size_t ring_count = 0;

    explicit OptimizerState(const TrainConfig& cfg);
};

/// Classic momentum on one tensor: v <- momentum v - lr g; p <- p + v.
/// Throws DivergenceError (step = state.step) on a non-finite gradient.
void sgd_momentum_update(Tensor4& param, const Tensor4& grad, Tensor4& velocity, double lr, double momentum,
                         std::size_t step);

/// Applies sgd_momentum_update to every parameter of the network.
void sgd_momentum_step(BranchNetwork& net, OptimizerState& state, const TrainConfig& cfg);

/// Records the step loss and decays lr by lr_decay_factor (floored at lr_min)
/// once the mean of the latest window improves on the mean of the window
/// before it by less than convergence_threshold (relative). History restarts
/// after every decay. Returns the (possibly updated) learning rate.
double lr_schedule_step(OptimizerState& state, const TrainConfig& cfg, double loss);

/// Decay rule alone: max(lr * factor, lr_min).
double decayed_lr(double lr, const TrainConfig& cfg);

// ---------------------------------------------------------------------------
// Data
// ---------------------------------------------------------------------------

/// Training images and labels held in memory.
struct TrainingSet {
    std::vector<Tensor4> images;            // each (1, s, s, 3)
    std::vector<std::size_t> labels;        // 0-based class per image
    std::vector<std::string> class_names;   // vehicle_id per class
};

/// Builds class indices from the train-role records (vehicle ids sorted).
TrainingSet make_training_set(const Manifest& manifest, const std::function<Tensor4(const Record&)>& load);

struct Batch {
    std::vector<std::size_t> indices;  // into TrainingSet; positive pairs first, then negative pairs
    std::vector<std::size_t> labels;
    std::size_t positive_pairs = 0;
    std::size_t negative_pairs = 0;
};

/// batch_size / 4 same-identity pairs followed by batch_size / 4
/// different-identity pairs, each pair occupying consecutive slots.
Batch sample_batch(std::span<const std::size_t> labels, std::size_t batch_size, std::mt19937_64& rng);

/// Mirror (optional) then rotation by theta_degrees about the image centre,
/// bilinear resampling with edge replication. Positive theta turns the image
/// content clockwise on screen (y axis pointing down).
Tensor4 augment_with(const Tensor4& image, bool mirror, double theta_degrees);
Tensor4 mirror_horizontal(const Tensor4& image);
Tensor4 augment(const Tensor4& image, std::mt19937_64& rng, const TrainConfig& cfg);

// ---------------------------------------------------------------------------
// Loop
// ---------------------------------------------------------------------------

struct TraceRow {
    char branch = 'H';
    std::size_t step = 0;  // 1-based within the branch network
    double lr = 0.0;
    double loss = 0.0;
};

struct TrainResult {
    QdModel model;
    std::vector<TraceRow> trace;
    std::map<char, double> final_loss;
};

using TraceCallback = std::function<void(const TraceRow&)>;

/// Trains one branch network for cfg.steps steps on the training set. The
/// network must already be initialised.
std::vector<TraceRow> train_branch(BranchNetwork& net, const TrainingSet& data, const TrainConfig& cfg,
                                   std::mt19937_64& rng, const TraceCallback& on_step = {});

/// Trains one independent network per enabled branch. Branch b draws from its
/// own RNG stream seeded by (cfg.seed, b).
TrainResult train(const TrainingSet& data, NetworkSpec spec, const TrainConfig& cfg,
                  const TraceCallback& on_step = {});

void write_trace_csv(std::ostream& os, const std::vector<TraceRow>& trace);

/// Seeds a stream from (seed, stream index) so streams are independent.
std::mt19937_64 make_stream(std::uint64_t seed, std::uint64_t stream);

}  // namespace qdfl
