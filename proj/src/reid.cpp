#include "qdfl/reid.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <memory>
#include <numeric>
#include <set>
#include <sstream>

namespace qdfl {

std::string_view role_name(Role r) {
    switch (r) {
        case Role::train: return "train";
        case Role::query: return "query";
        case Role::gallery: return "gallery";
    }
    return "?";
}

Role role_from_name(std::string_view s) {
    if (s == "train") return Role::train;
    if (s == "query") return Role::query;
    if (s == "gallery") return Role::gallery;
    throw DataError("unknown role '" + std::string(s) + "'");
}

std::vector<const Record*> Manifest::with_role(Role r) const {
    std::vector<const Record*> out;
    for (const Record& rec : records)
        if (rec.role == r) out.push_back(&rec);
    return out;
}

std::filesystem::path Manifest::resolve(const Record& r) const {
    std::filesystem::path p(r.image_path);
    if (p.is_absolute() || base_dir.empty()) return p;
    return base_dir / p;
}

void Manifest::validate() const {
    std::set<std::string> seen;
    for (const Record& r : records) {
        if (r.sample_id.empty()) throw DataError("manifest record with empty sample_id");
        if (r.vehicle_id.empty()) throw DataError("manifest record " + r.sample_id + " has no vehicle_id");
        if (!seen.insert(r.sample_id).second) throw DataError("duplicate sample_id " + r.sample_id);
    }
}

namespace {

std::string trim(std::string s) {
    const auto not_space = [](unsigned char c) { return !std::isspace(c); };
    s.erase(s.begin(), std::find_if(s.begin(), s.end(), not_space));
    s.erase(std::find_if(s.rbegin(), s.rend(), not_space).base(), s.end());
    return s;
}

std::vector<std::string> split_csv(const std::string& line) {
    std::vector<std::string> out;
    std::string field;
    std::istringstream ss(line);
    while (std::getline(ss, field, ',')) out.push_back(trim(field));
    if (!line.empty() && line.back() == ',') out.emplace_back();
    return out;
}

}  // namespace

Manifest parse_manifest(std::istream& in, const std::filesystem::path& base_dir) {
    Manifest m;
    m.base_dir = base_dir;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        line = trim(line);
        if (line.empty() || line[0] == '#') continue;
        if (line.rfind("sample_id", 0) == 0) continue;
        const auto f = split_csv(line);
        if (f.size() != 5) {
            throw DataError("manifest line " + std::to_string(line_no) + ": expected 5 fields, got " +
                            std::to_string(f.size()));
        }
        Record r;
        r.sample_id = f[0];
        r.image_path = f[1];
        r.vehicle_id = f[2];
        if (!f[3].empty()) r.camera_id = f[3];
        r.role = role_from_name(f[4]);
        m.records.push_back(std::move(r));
    }
    m.validate();
    return m;
}

Manifest load_manifest(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open manifest " + path.string());
    return parse_manifest(in, path.parent_path());
}

void write_manifest(std::ostream& out, const Manifest& m) {
    out << "sample_id,image_path,vehicle_id,camera_id,role\n";
    for (const Record& r : m.records) {
        out << r.sample_id << ',' << r.image_path << ',' << r.vehicle_id << ',' << r.camera_id.value_or("") << ','
            << role_name(r.role) << '\n';
    }
}

void save_manifest(const std::filesystem::path& path, const Manifest& m) {
    std::ofstream out(path);
    if (!out) throw Error("cannot open " + path.string() + " for writing");
    write_manifest(out, m);
}

// ---------------------------------------------------------------------------

DistanceMatrix distance_matrix(std::span<const FeatureVector> queries, std::span<const FeatureVector> gallery) {
    DistanceMatrix d{queries.size(), gallery.size(), std::vector<double>(queries.size() * gallery.size())};
    const std::size_t len = queries.empty() ? (gallery.empty() ? 0 : gallery[0].size()) : queries[0].size();
    for (const auto& v : queries)
        if (v.size() != len) throw ShapeError("distance_matrix: descriptor length mismatch");
    for (const auto& v : gallery)
        if (v.size() != len) throw ShapeError("distance_matrix: descriptor length mismatch");
    for (std::size_t i = 0; i < queries.size(); ++i) {
        for (std::size_t j = 0; j < gallery.size(); ++j) {
            double s = 0.0;
            for (std::size_t k = 0; k < len; ++k) {
                const double diff = queries[i][k] - gallery[j][k];
                s += diff * diff;
            }
            d.values[i * gallery.size() + j] = std::sqrt(s);
        }
    }
    return d;
}

std::string_view protocol_name(Protocol p) { return p == Protocol::veri ? "veri" : "plain"; }

Protocol protocol_from_name(std::string_view s) {
    if (s == "plain") return Protocol::plain;
    if (s == "veri") return Protocol::veri;
    throw ConfigError("unknown protocol '" + std::string(s) + "' (expected veri or plain)");
}

RankingResult rank_with_exclusion(const DistanceMatrix& d, std::span<const Record* const> queries,
                                  std::span<const Record* const> gallery, Protocol protocol) {
    if (d.rows != queries.size() || d.cols != gallery.size()) throw ShapeError("rank: matrix/list size mismatch");
    if (protocol == Protocol::veri) {
        for (const Record* r : queries)
            if (!r->camera_id) throw ProtocolError("veri protocol: query " + r->sample_id + " has no camera_id");
        for (const Record* r : gallery)
            if (!r->camera_id) throw ProtocolError("veri protocol: gallery " + r->sample_id + " has no camera_id");
    }
    RankingResult result;
    result.queries.reserve(queries.size());
    for (std::size_t q = 0; q < queries.size(); ++q) {
        QueryRanking qr;
        qr.query = q;
        qr.excluded.assign(gallery.size(), false);
        for (std::size_t g = 0; g < gallery.size(); ++g) {
            if (protocol == Protocol::veri && *gallery[g]->camera_id == *queries[q]->camera_id) {
                qr.excluded[g] = true;
            } else {
                qr.order.push_back(g);
            }
        }
        std::sort(qr.order.begin(), qr.order.end(), [&](std::size_t a, std::size_t b) {
            const double da = d(q, a), db = d(q, b);
            if (da != db) return da < db;
            return gallery[a]->sample_id < gallery[b]->sample_id;
        });
        qr.distances.reserve(qr.order.size());
        for (std::size_t g : qr.order) qr.distances.push_back(d(q, g));
        result.queries.push_back(std::move(qr));
    }
    return result;
}

std::optional<double> average_precision(std::span<const bool> hits) {
    std::size_t found = 0;
    double sum = 0.0;
    for (std::size_t r = 0; r < hits.size(); ++r) {
        if (!hits[r]) continue;
        ++found;
        sum += static_cast<double>(found) / static_cast<double>(r + 1);
    }
    if (found == 0) return std::nullopt;
    return sum / static_cast<double>(found);
}

double EvalReport::cmc_at(std::size_t r) const {
    if (r == 0) throw IndexError("cmc ranks are 1-based");
    if (cmc.empty()) return 0.0;
    return cmc[std::min(r, cmc.size()) - 1];
}

EvalReport evaluate(const Manifest& manifest, const DescriptorTable& descriptors, Protocol protocol) {
    const auto queries = manifest.with_role(Role::query);
    const auto gallery = manifest.with_role(Role::gallery);

    std::vector<std::string> missing;
    auto lookup = [&](const std::vector<const Record*>& recs) {
        std::vector<FeatureVector> out;
        out.reserve(recs.size());
        for (const Record* r : recs) {
            auto it = descriptors.find(r->sample_id);
            if (it == descriptors.end()) {
                missing.push_back(r->sample_id);
                out.emplace_back();
            } else {
                out.push_back(it->second);
            }
        }
        return out;
    };
    const auto qf = lookup(queries);
    const auto gf = lookup(gallery);
    if (!missing.empty()) {
        std::string msg = "missing descriptors for " + std::to_string(missing.size()) + " sample(s):";
        for (const auto& id : missing) msg += " " + id;
        throw DataError(msg);
    }
    if (queries.empty() || gallery.empty()) throw DataError("evaluate: manifest has no query or no gallery records");

    const DistanceMatrix d = distance_matrix(qf, gf);
    const RankingResult ranking = rank_with_exclusion(d, queries, gallery, protocol);

    EvalReport report;
    report.protocol = protocol;
    std::vector<std::size_t> first_hit;
    std::size_t longest = 0;
    for (const QueryRanking& qr : ranking.queries) {
        const Record& q = *queries[qr.query];
        const std::size_t len = qr.order.size();
        const auto hits = std::make_unique<bool[]>(len);
        for (std::size_t r = 0; r < len; ++r) hits[r] = gallery[qr.order[r]]->vehicle_id == q.vehicle_id;
        const auto ap = average_precision(std::span<const bool>(hits.get(), len));
        if (!ap) {
            ++report.n_skipped;
            report.skipped_queries.push_back(q.sample_id);
            continue;
        }
        ++report.n_queries_used;
        report.per_query_ap[q.sample_id] = *ap;
        first_hit.push_back(static_cast<std::size_t>(std::find(hits.get(), hits.get() + len, true) - hits.get()));
        longest = std::max(longest, qr.order.size());
    }
    if (report.n_queries_used == 0) throw DataError("evaluate: no usable queries");

    // Summed in sample_id order so the result does not depend on manifest order.
    double ap_sum = 0.0;
    for (const auto& [id, ap] : report.per_query_ap) ap_sum += ap;
    report.map = ap_sum / static_cast<double>(report.n_queries_used);
    std::vector<std::size_t> counts(longest, 0);
    for (std::size_t h : first_hit) ++counts[h];
    report.cmc.resize(longest);
    std::size_t cumulative = 0;
    for (std::size_t r = 0; r < longest; ++r) {
        cumulative += counts[r];
        report.cmc[r] = static_cast<double>(cumulative) / static_cast<double>(report.n_queries_used);
    }
    return report;
}

std::string summary_line(const EvalReport& r) {
    std::ostringstream os;
    os << std::fixed << std::setprecision(4) << "map=" << r.map << " rank1=" << r.cmc_at(1)
       << " rank5=" << r.cmc_at(5);
    return os.str();
}

void print_report_table(std::ostream& os, const EvalReport& r, std::size_t max_rank) {
    const auto flags = os.flags();
    os << "protocol: " << protocol_name(r.protocol) << "  queries used: " << r.n_queries_used
       << "  skipped: " << r.n_skipped << '\n';
    os << std::fixed << std::setprecision(4);
    os << "  MAP     " << r.map << '\n';
    for (std::size_t k = 1; k <= std::min(max_rank, r.cmc.size()); ++k) {
        if (k <= 5 || k % 5 == 0) os << "  Rank=" << std::left << std::setw(3) << k << std::right << r.cmc_at(k) << '\n';
    }
    os.flags(flags);
}

void write_cmc_csv(std::ostream& os, const EvalReport& r) {
    os << "rank,cmc\n";
    const auto flags = os.flags();
    os << std::setprecision(17);
    for (std::size_t k = 0; k < r.cmc.size(); ++k) os << (k + 1) << ',' << r.cmc[k] << '\n';
    os.flags(flags);
}

Manifest vehicleid_split(const Manifest& manifest, std::size_t split_size, std::mt19937_64& rng) {
    std::map<std::string, std::vector<const Record*>> by_id;
    for (const Record& r : manifest.records) by_id[r.vehicle_id].push_back(&r);
    if (split_size == 0 || by_id.size() < split_size) {
        throw DataError("vehicleid_split: need " + std::to_string(split_size) + " identities, manifest has " +
                        std::to_string(by_id.size()));
    }
    std::vector<std::string> ids;
    for (const auto& [id, recs] : by_id) ids.push_back(id);
    std::shuffle(ids.begin(), ids.end(), rng);
    ids.resize(split_size);
    std::sort(ids.begin(), ids.end());

    Manifest out;
    out.base_dir = manifest.base_dir;
    for (const std::string& id : ids) {
        const auto& recs = by_id[id];
        std::uniform_int_distribution<std::size_t> pick(0, recs.size() - 1);
        const std::size_t chosen = pick(rng);
        for (std::size_t i = 0; i < recs.size(); ++i) {
            Record r = *recs[i];
            r.role = i == chosen ? Role::gallery : Role::query;
            out.records.push_back(std::move(r));
        }
    }
    return out;
}

}  // namespace qdfl
