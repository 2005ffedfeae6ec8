#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "qdfl/directional.hpp"
#include "qdfl/layers.hpp"

namespace qdfl {

enum class Profile : unsigned char { table1 = 0, toy = 1 };

struct StageSpec {
    std::size_t channels = 0;
    double slope = 0.15;

    friend bool operator==(const StageSpec&, const StageSpec&) = default;
};

/// Ordered subset of {H, V, D, A}; iteration order is always H, V, D, A.
class BranchSet {
public:
    BranchSet() = default;
    static BranchSet all();
    static BranchSet parse(const std::string& letters);

    void insert(Direction d) { mask_ |= bit(d); }
    bool contains(Direction d) const { return (mask_ & bit(d)) != 0; }
    bool empty() const { return mask_ == 0; }
    std::vector<Direction> directions() const;
    std::string str() const;
    std::uint8_t mask() const { return mask_; }
    static BranchSet from_mask(std::uint8_t mask);

    friend bool operator==(const BranchSet&, const BranchSet&) = default;

private:
    static std::uint8_t bit(Direction d) { return static_cast<std::uint8_t>(1u << static_cast<unsigned>(d)); }
    std::uint8_t mask_ = 0;
};

/// Declarative description of the backbone and branch assembly.
struct NetworkSpec {
    Profile profile = Profile::table1;
    std::size_t input_size = 128;
    std::size_t input_channels = 3;
    std::size_t stem_channels = 64;
    double stem_slope = 0.15;
    std::vector<StageSpec> stages;  // one SDU + max pool each
    PoolConfig pool;
    BranchSet branches = BranchSet::all();
    std::size_t sn_window = 4;
    std::size_t num_classes = 0;  // classifier width used for training
    double bn_epsilon = 1e-5;
    double bn_momentum = 0.1;
    bool center_input = false;          // map pixels from [0,1] to [-0.5,0.5]
    bool normalize_descriptor = false;  // L2-normalise the concatenated descriptor

    /// Spatial size of the final backbone map.
    std::size_t final_size() const;
    std::size_t final_channels() const;
    /// Feature length of one branch after flattening its normalised map.
    std::size_t branch_dim(Direction dir) const;
    std::size_t descriptor_length() const;
    void validate() const;

    friend bool operator==(const NetworkSpec&, const NetworkSpec&) = default;
};

/// The full-size configuration: 128x128x3 input, stem 64, SDUs 64..320.
NetworkSpec table1_profile(std::size_t num_classes = 0);

/// Reduced configuration for desk-scale work: stem `seed_channels`, stage k
/// has k * seed_channels channels, and as many stages as keep the final map at
/// least 4x4. The last stage uses slope 0, as in the full profile.
NetworkSpec toy_profile(std::size_t seed_channels, std::size_t input_d, std::size_t num_classes = 0);

/// One named intermediate output shape of a backbone forward pass.
struct ShapeTrace {
    std::string name;
    Shape shape;
};

/// Stem CBLR followed by (SDU, max pool) stages.
class Backbone {
public:
    Backbone() = default;
    explicit Backbone(const NetworkSpec& spec);

    Tensor4 forward(const Tensor4& x, Mode mode, std::vector<ShapeTrace>* trace = nullptr);
    Tensor4 backward(const Tensor4& grad_out);

    void visit(const std::string& prefix, const ParamVisitor& fn);
    void visit_buffers(const std::string& prefix, const BufferVisitor& fn);
    std::uint64_t regime() const;

    CblrBlock& stem() { return stem_; }
    ShortDenseUnit& unit(std::size_t i) { return units_.at(i); }
    std::size_t stage_count() const { return units_.size(); }

private:
    CblrBlock stem_;
    std::vector<ShortDenseUnit> units_;
    std::vector<MaxPoolLayer> pools_;
};

/// Flattened features of one sample: slot-major, channel-fastest (t * c + k).
std::vector<double> flatten_sample(const DirectionalMap& m, std::size_t sample);

struct DescriptorSegment {
    Direction direction;
    std::size_t offset;
    std::size_t length;
};

/// Concatenated, spatially normalised directional features of one image.
struct Descriptor {
    std::vector<double> values;
    std::vector<DescriptorSegment> segments;
    std::size_t d = 0;
    std::size_t c = 0;

    /// Slice of values belonging to dir; throws if the branch is absent.
    std::vector<double> segment(Direction dir) const;
};

/// Pools and normalises a backbone output for each requested branch and
/// concatenates in H, V, D, A order. One descriptor per sample.
std::vector<Descriptor> assemble_descriptors(const Tensor4& backbone_out, const BranchSet& branches,
                                             std::size_t sn_window, bool normalize = false);

/// Backbone + one directional pooling + spatial norm + bias-free classifier.
class BranchNetwork {
public:
    BranchNetwork() = default;
    BranchNetwork(const NetworkSpec& spec, Direction dir);

    Direction direction() const { return dir_; }
    std::size_t feature_dim() const;
    /// 0 when built without a classifier (extraction-only networks).
    std::size_t num_classes() const { return spec_.num_classes; }

    /// Normalised directional map (n, L, 1, c).
    DirectionalMap features(const Tensor4& images, Mode mode);
    /// Class scores W^T z as an (n, 1, 1, C) tensor.
    Tensor4 logits(const Tensor4& images, Mode mode);
    /// Backpropagates d loss / d logits; accumulates every parameter gradient.
    /// Returns the gradient with respect to the input images.
    Tensor4 backward(const Tensor4& grad_logits);

    Param& classifier() { return classifier_; }
    Backbone& backbone() { return backbone_; }

    void visit(const ParamVisitor& fn);
    void visit_buffers(const BufferVisitor& fn);
    void zero_grad();
    std::uint64_t regime() const;
    std::size_t parameter_count();

    /// Weights ~ N(0, std^2); biases 0; BN gamma 1, beta 0.
    void initialize(std::mt19937_64& rng, double std);

private:
    Tensor4 prepare_input(const Tensor4& images) const;

    NetworkSpec spec_;
    Direction dir_ = Direction::horizontal;
    Backbone backbone_;
    std::optional<PoolPlan> plan_;
    SpatialNormCache sn_cache_;
    Param classifier_;  // (1, 1, feature_dim, C)
    std::optional<Tensor4> feature_cache_;  // flattened (n, 1, 1, dim) SN output
};

/// logits = W^T z for a flattened feature batch (n, 1, 1, dim) and W (1, 1, dim, C).
Tensor4 classifier_forward(const Tensor4& features, const Tensor4& weights);

/// One independently trained network per enabled branch.
struct QdModel {
    NetworkSpec spec;
    std::vector<BranchNetwork> branches;  // H, V, D, A order restricted to spec.branches

    QdModel() = default;
    explicit QdModel(const NetworkSpec& spec);

    BranchNetwork& branch(Direction dir);
    /// Descriptor per sample of images (n, s, s, c); eval mode.
    std::vector<Descriptor> extract(const Tensor4& images);
};

}  // namespace qdfl
