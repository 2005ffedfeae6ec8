#pragma once

#include <filesystem>
#include <iosfwd>
#include <map>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "qdfl/errors.hpp"

namespace qdfl {

enum class Role { train, query, gallery };

std::string_view role_name(Role r);
Role role_from_name(std::string_view s);

struct Record {
    std::string sample_id;
    std::string image_path;
    std::string vehicle_id;
    std::optional<std::string> camera_id;  // empty field in the file
    Role role = Role::train;

    friend bool operator==(const Record&, const Record&) = default;
};

/// Dataset listing. sample_ids are unique.
struct Manifest {
    std::vector<Record> records;
    /// Directory relative image paths are resolved against.
    std::filesystem::path base_dir;

    std::vector<const Record*> with_role(Role r) const;
    std::filesystem::path resolve(const Record& r) const;
    void validate() const;
};

// One record per line: sample_id,image_path,vehicle_id,camera_id,role
// Blank lines and lines starting with '#' are ignored; an optional header
// line starting with "sample_id" is skipped.
Manifest parse_manifest(std::istream& in, const std::filesystem::path& base_dir = {});
Manifest load_manifest(const std::filesystem::path& path);
void write_manifest(std::ostream& out, const Manifest& m);
void save_manifest(const std::filesystem::path& path, const Manifest& m);

// ---------------------------------------------------------------------------
// Matching
// ---------------------------------------------------------------------------

struct DistanceMatrix {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<double> values;

    double operator()(std::size_t r, std::size_t c) const { return values[r * cols + c]; }
};

using FeatureVector = std::vector<double>;

/// D(i, j) = || q_i - g_j ||_2
DistanceMatrix distance_matrix(std::span<const FeatureVector> queries, std::span<const FeatureVector> gallery);

enum class Protocol { plain, veri };
std::string_view protocol_name(Protocol p);
Protocol protocol_from_name(std::string_view s);

struct QueryRanking {
    std::size_t query = 0;            // index into the query list
    std::vector<std::size_t> order;   // gallery indices, best first; excluded entries absent
    std::vector<double> distances;    // aligned with order, non-decreasing
    std::vector<bool> excluded;       // per gallery index
};

struct RankingResult {
    std::vector<QueryRanking> queries;
};

/// Ranks the gallery for every query by distance, ties broken by gallery
/// sample_id ascending. Under veri, gallery entries sharing the query's
/// camera_id are removed first (ProtocolError if a camera id is missing).
RankingResult rank_with_exclusion(const DistanceMatrix& d, std::span<const Record* const> queries,
                                  std::span<const Record* const> gallery, Protocol protocol);

/// Hit-based AP over a ranked list: (1/|rel|) * sum over hits at rank r of
/// hits_so_far / r. nullopt when the list holds no relevant item.
std::optional<double> average_precision(std::span<const bool> hits);

struct EvalReport {
    double map = 0.0;
    std::vector<double> cmc;  // cmc[r-1] = fraction with first hit at rank <= r
    std::size_t n_queries_used = 0;
    std::size_t n_skipped = 0;
    std::vector<std::string> skipped_queries;
    std::map<std::string, double> per_query_ap;
    Protocol protocol = Protocol::plain;

    /// CMC at rank r (1-based); ranks past the longest list keep the last value.
    double cmc_at(std::size_t r) const;
};

using DescriptorTable = std::map<std::string, FeatureVector>;

/// mAP and CMC over the manifest's query/gallery records.
EvalReport evaluate(const Manifest& manifest, const DescriptorTable& descriptors, Protocol protocol);

/// "map=0.8123 rank1=0.9000 rank5=1.0000"
std::string summary_line(const EvalReport& r);
void print_report_table(std::ostream& os, const EvalReport& r, std::size_t max_rank = 20);
void write_cmc_csv(std::ostream& os, const EvalReport& r);

/// Samples split_size identities; for each, one random image becomes the
/// gallery entry and the remaining images become queries.
Manifest vehicleid_split(const Manifest& manifest, std::size_t split_size, std::mt19937_64& rng);

}  // namespace qdfl
