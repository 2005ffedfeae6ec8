#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <string>
#include <vector>

#include "qdfl/network.hpp"
#include "qdfl/reid.hpp"
#include "qdfl/training.hpp"

namespace qdfl {

// ---------------------------------------------------------------------------
// Run configuration: line-oriented "key = value", '#' starts a comment.
// ---------------------------------------------------------------------------

struct RunConfig {
    TrainConfig train;
    std::string profile = "toy";
    std::size_t seed_channels = 8;  // toy profile only
    std::size_t input_size = 32;    // toy profile only; table1 is fixed at 128
    std::string branches = "HVDA";
    std::size_t sn_window = 4;
    bool center_input = false;
    bool normalize_descriptor = false;
    std::filesystem::path manifest;
    std::filesystem::path model_out = "model.qdm";
    std::filesystem::path trace_out = "trace.csv";

    /// Network spec for the given number of training classes.
    NetworkSpec network(std::size_t num_classes) const;
    /// Canonical "key = value" listing of every field, in a fixed order.
    std::string canonical() const;
    /// fnv1a64 of canonical() with the output paths left out, so the same
    /// training setup hashes the same wherever its outputs go.
    std::uint64_t fingerprint() const;
};

/// Parses a config. Unknown keys, malformed values and a missing manifest key
/// throw ConfigError. Keys left at their default are reported on `notices`.
/// Relative paths resolve against base_dir.
RunConfig parse_run_config(std::istream& in, const std::filesystem::path& base_dir = {},
                           std::ostream* notices = nullptr);
RunConfig load_run_config(const std::filesystem::path& path, std::ostream* notices = nullptr);

/// 64-bit FNV-1a.
std::uint64_t fnv1a64(std::string_view bytes);

// ---------------------------------------------------------------------------
// Model file "QDM1"
// ---------------------------------------------------------------------------

inline constexpr std::uint32_t kModelFormatVersion = 1;

struct ModelMetadata {
    std::uint64_t config_hash = 0;
    std::uint64_t steps = 0;
    std::map<char, double> final_loss;  // per branch letter

    friend bool operator==(const ModelMetadata&, const ModelMetadata&) = default;
};

struct ModelFile {
    QdModel model;
    ModelMetadata metadata;
};

void write_model(std::ostream& out, QdModel& model, const ModelMetadata& meta);
ModelFile read_model(std::istream& in);
void save_model(const std::filesystem::path& path, QdModel& model, const ModelMetadata& meta);
ModelFile load_model(const std::filesystem::path& path);

void write_spec(std::ostream& out, const NetworkSpec& spec);
NetworkSpec read_spec(std::istream& in);

// ---------------------------------------------------------------------------
// Images
// ---------------------------------------------------------------------------

/// 8-bit interleaved RGB raster.
struct RgbImage {
    std::size_t width = 0;
    std::size_t height = 0;
    std::vector<std::uint8_t> pixels;  // row-major, 3 bytes per pixel
};

RgbImage read_png(const std::filesystem::path& path);
void write_png(const std::filesystem::path& path, const RgbImage& image);

/// (1, h, w, 3) tensor with values in [0, 1].
Tensor4 to_tensor(const RgbImage& image);
RgbImage to_rgb(const Tensor4& image);

/// Bilinear resize of every sample to size x size (align-corners=false).
Tensor4 resize_bilinear(const Tensor4& image, std::size_t size);

/// Reads a PNG or QDT1 file and returns a (1, size, size, 3) tensor in [0, 1].
/// QDT1 content is taken as already scaled.
Tensor4 load_image(const std::filesystem::path& path, std::size_t size);

// ---------------------------------------------------------------------------
// Synthetic dataset
// ---------------------------------------------------------------------------

struct SynthOptions {
    std::size_t ids = 20;
    std::size_t per_id = 10;
    std::size_t size = 32;
    std::uint64_t seed = 0;
};

/// Renders image `index` of identity `id` deterministically.
RgbImage render_synthetic(const SynthOptions& opts, std::size_t id, std::size_t index);

/// Records only (no files). The first half of the identities are train; for
/// each remaining identity the first image from each camera is a query and
/// the rest form the gallery. Cameras alternate "c1", "c2".
Manifest synthetic_manifest(const SynthOptions& opts);

/// Writes images/<id>_<index>.png and manifest.csv under out_dir.
Manifest write_synthetic_dataset(const SynthOptions& opts, const std::filesystem::path& out_dir);

// ---------------------------------------------------------------------------
// Descriptor archive: (N, 1, 1, D) QDT1 tensor plus "<path>.index.csv"
// with one "sample_id,row" line per descriptor.
// ---------------------------------------------------------------------------

std::filesystem::path index_path_for(const std::filesystem::path& features);
void save_descriptors(const std::filesystem::path& path, const DescriptorTable& table,
                      const std::vector<std::string>& order);
DescriptorTable load_descriptors(const std::filesystem::path& path);

}  // namespace qdfl
