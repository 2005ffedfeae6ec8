#include "qdfl/io.hpp"

#include <png.h>

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <iomanip>
#include <numbers>
#include <ostream>
#include <sstream>

#include "qdfl/binary_io.hpp"

namespace qdfl {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// Run configuration
// ---------------------------------------------------------------------------

namespace {

std::string trim(std::string_view s) {
    const auto first = s.find_first_not_of(" \t\r");
    if (first == std::string_view::npos) return {};
    const auto last = s.find_last_not_of(" \t\r");
    return std::string(s.substr(first, last - first + 1));
}

double parse_double(const std::string& key, const std::string& v) {
    double out = 0.0;
    const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (ec != std::errc{} || ptr != v.data() + v.size() || !std::isfinite(out)) {
        throw ConfigError("config key '" + key + "': expected a number, got '" + v + "'");
    }
    return out;
}

std::uint64_t parse_uint(const std::string& key, const std::string& v) {
    std::uint64_t out = 0;
    const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (ec != std::errc{} || ptr != v.data() + v.size()) {
        throw ConfigError("config key '" + key + "': expected a non-negative integer, got '" + v + "'");
    }
    return out;
}

bool parse_bool(const std::string& key, const std::string& v) {
    if (v == "true" || v == "1" || v == "yes") return true;
    if (v == "false" || v == "0" || v == "no") return false;
    throw ConfigError("config key '" + key + "': expected true/false, got '" + v + "'");
}

std::string format_double(double v) {
    std::ostringstream os;
    os << std::setprecision(17) << v;
    return os.str();
}

struct ConfigKey {
    const char* name;
    std::function<void(RunConfig&, const std::string&, const fs::path&)> set;
    std::function<std::string(const RunConfig&)> get;
};

fs::path resolve_path(const fs::path& base, const std::string& v) {
    const fs::path p(v);
    return p.is_absolute() || base.empty() ? p : base / p;
}

const std::vector<ConfigKey>& config_keys() {
    static const std::vector<ConfigKey> keys = [] {
        std::vector<ConfigKey> k;
        auto num = [&k](const char* name, double TrainConfig::*field) {
            k.push_back({name,
                         [name, field](RunConfig& c, const std::string& v, const fs::path&) {
                             c.train.*field = parse_double(name, v);
                         },
                         [field](const RunConfig& c) { return format_double(c.train.*field); }});
        };
        auto count = [&k](const char* name, std::size_t TrainConfig::*field) {
            k.push_back({name,
                         [name, field](RunConfig& c, const std::string& v, const fs::path&) {
                             c.train.*field = parse_uint(name, v);
                         },
                         [field](const RunConfig& c) { return std::to_string(c.train.*field); }});
        };
        num("alpha", &TrainConfig::alpha);
        num("momentum", &TrainConfig::momentum);
        num("lr_initial", &TrainConfig::lr_initial);
        num("lr_min", &TrainConfig::lr_min);
        num("lr_decay_factor", &TrainConfig::lr_decay_factor);
        count("batch_size", &TrainConfig::batch_size);
        num("rotation_range", &TrainConfig::rotation_range);
        num("mirror_probability", &TrainConfig::mirror_probability);
        num("init_std", &TrainConfig::init_std);
        count("convergence_window", &TrainConfig::convergence_window);
        num("convergence_threshold", &TrainConfig::convergence_threshold);
        count("steps", &TrainConfig::steps);
        k.push_back({"seed",
                     [](RunConfig& c, const std::string& v, const fs::path&) { c.train.seed = parse_uint("seed", v); },
                     [](const RunConfig& c) { return std::to_string(c.train.seed); }});
        k.push_back({"profile",
                     [](RunConfig& c, const std::string& v, const fs::path&) {
                         if (v != "toy" && v != "table1") throw ConfigError("config key 'profile': expected toy or table1");
                         c.profile = v;
                     },
                     [](const RunConfig& c) { return c.profile; }});
        k.push_back({"seed_channels",
                     [](RunConfig& c, const std::string& v, const fs::path&) {
                         c.seed_channels = parse_uint("seed_channels", v);
                     },
                     [](const RunConfig& c) { return std::to_string(c.seed_channels); }});
        k.push_back({"input_size",
                     [](RunConfig& c, const std::string& v, const fs::path&) {
                         c.input_size = parse_uint("input_size", v);
                     },
                     [](const RunConfig& c) { return std::to_string(c.input_size); }});
        k.push_back({"branches",
                     [](RunConfig& c, const std::string& v, const fs::path&) {
                         BranchSet::parse(v);
                         c.branches = v;
                     },
                     [](const RunConfig& c) { return c.branches; }});
        k.push_back({"sn_window",
                     [](RunConfig& c, const std::string& v, const fs::path&) {
                         c.sn_window = parse_uint("sn_window", v);
                     },
                     [](const RunConfig& c) { return std::to_string(c.sn_window); }});
        k.push_back({"center_input",
                     [](RunConfig& c, const std::string& v, const fs::path&) {
                         c.center_input = parse_bool("center_input", v);
                     },
                     [](const RunConfig& c) { return std::string(c.center_input ? "true" : "false"); }});
        k.push_back({"normalize_descriptor",
                     [](RunConfig& c, const std::string& v, const fs::path&) {
                         c.normalize_descriptor = parse_bool("normalize_descriptor", v);
                     },
                     [](const RunConfig& c) { return std::string(c.normalize_descriptor ? "true" : "false"); }});
        k.push_back({"manifest",
                     [](RunConfig& c, const std::string& v, const fs::path& base) { c.manifest = resolve_path(base, v); },
                     [](const RunConfig& c) { return c.manifest.string(); }});
        k.push_back({"model_out",
                     [](RunConfig& c, const std::string& v, const fs::path& base) { c.model_out = resolve_path(base, v); },
                     [](const RunConfig& c) { return c.model_out.string(); }});
        k.push_back({"trace_out",
                     [](RunConfig& c, const std::string& v, const fs::path& base) { c.trace_out = resolve_path(base, v); },
                     [](const RunConfig& c) { return c.trace_out.string(); }});
        return k;
    }();
    return keys;
}

}  // namespace

NetworkSpec RunConfig::network(std::size_t num_classes) const {
    NetworkSpec spec = profile == "table1" ? table1_profile(num_classes)
                                           : toy_profile(seed_channels, input_size, num_classes);
    spec.branches = BranchSet::parse(branches);
    spec.sn_window = sn_window;
    spec.center_input = center_input;
    spec.normalize_descriptor = normalize_descriptor;
    spec.validate();
    return spec;
}

std::string RunConfig::canonical() const {
    std::string out;
    for (const ConfigKey& k : config_keys()) out += std::string(k.name) + " = " + k.get(*this) + "\n";
    return out;
}

std::uint64_t RunConfig::fingerprint() const {
    RunConfig c = *this;
    c.model_out.clear();
    c.trace_out.clear();
    return fnv1a64(c.canonical());
}

RunConfig parse_run_config(std::istream& in, const fs::path& base_dir, std::ostream* notices) {
    RunConfig cfg;
    std::vector<std::string> seen;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
        const std::string body = trim(line);
        if (body.empty()) continue;
        const auto eq = body.find('=');
        if (eq == std::string::npos) {
            throw ConfigError("config line " + std::to_string(line_no) + ": expected 'key = value'");
        }
        const std::string key = trim(std::string_view(body).substr(0, eq));
        const std::string value = trim(std::string_view(body).substr(eq + 1));
        const auto& keys = config_keys();
        const auto it = std::find_if(keys.begin(), keys.end(), [&](const ConfigKey& k) { return key == k.name; });
        if (it == keys.end()) throw ConfigError("config line " + std::to_string(line_no) + ": unknown key '" + key + "'");
        if (std::find(seen.begin(), seen.end(), key) != seen.end()) {
            throw ConfigError("config line " + std::to_string(line_no) + ": duplicate key '" + key + "'");
        }
        if (value.empty()) throw ConfigError("config line " + std::to_string(line_no) + ": empty value for '" + key + "'");
        it->set(cfg, value, base_dir);
        seen.push_back(key);
    }
    if (std::find(seen.begin(), seen.end(), "manifest") == seen.end()) {
        throw ConfigError("config: required key 'manifest' is missing");
    }
    if (notices) {
        for (const ConfigKey& k : config_keys())
            if (std::find(seen.begin(), seen.end(), k.name) == seen.end())
                *notices << "config: " << k.name << " not set, using default " << k.get(cfg) << '\n';
    }
    cfg.train.validate();
    if (cfg.profile == "toy" && cfg.seed_channels == 0) throw ConfigError("config: seed_channels must be positive");
    return cfg;
}

RunConfig load_run_config(const fs::path& path, std::ostream* notices) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file " + path.string());
    return parse_run_config(in, path.parent_path(), notices);
}

std::uint64_t fnv1a64(std::string_view bytes) {
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (unsigned char c : bytes) {
        h ^= c;
        h *= 0x100000001b3ull;
    }
    return h;
}

// ---------------------------------------------------------------------------
// Model file
// ---------------------------------------------------------------------------

namespace {

constexpr char kModelMagic[4] = {'Q', 'D', 'M', '1'};
constexpr std::uint8_t kParamEntry = 0;
constexpr std::uint8_t kBufferEntry = 1;

struct NamedTensor {
    std::uint8_t kind;
    std::string name;
    Tensor4* tensor;
};

std::vector<NamedTensor> collect_tensors(BranchNetwork& net) {
    std::vector<NamedTensor> out;
    net.visit([&](const std::string& name, Param& p) { out.push_back({kParamEntry, name, &p.value}); });
    net.visit_buffers([&](const std::string& name, Tensor4& t) { out.push_back({kBufferEntry, name, &t}); });
    return out;
}

}  // namespace

void write_spec(std::ostream& out, const NetworkSpec& spec) {
    using namespace binary;
    put_u8(out, static_cast<std::uint8_t>(spec.profile));
    put_u64(out, spec.input_size);
    put_u64(out, spec.input_channels);
    put_u64(out, spec.stem_channels);
    put_f64(out, spec.stem_slope);
    put_u64(out, spec.stages.size());
    for (const StageSpec& s : spec.stages) {
        put_u64(out, s.channels);
        put_f64(out, s.slope);
    }
    put_u64(out, spec.pool.window);
    put_u64(out, spec.pool.stride);
    put_u64(out, spec.pool.pad);
    put_u8(out, spec.branches.mask());
    put_u64(out, spec.sn_window);
    put_u64(out, spec.num_classes);
    put_f64(out, spec.bn_epsilon);
    put_f64(out, spec.bn_momentum);
    put_u8(out, spec.center_input ? 1 : 0);
    put_u8(out, spec.normalize_descriptor ? 1 : 0);
}

NetworkSpec read_spec(std::istream& in) {
    using namespace binary;
    NetworkSpec spec;
    const std::uint8_t profile = get_u8(in);
    if (profile > 1) throw FormatError("model file: unknown profile tag");
    spec.profile = static_cast<Profile>(profile);
    spec.input_size = get_u64(in);
    spec.input_channels = get_u64(in);
    spec.stem_channels = get_u64(in);
    spec.stem_slope = get_f64(in);
    const std::uint64_t n_stages = get_u64(in);
    if (n_stages > 64) throw FormatError("model file: implausible stage count");
    for (std::uint64_t i = 0; i < n_stages; ++i) {
        StageSpec s;
        s.channels = get_u64(in);
        s.slope = get_f64(in);
        spec.stages.push_back(s);
    }
    spec.pool.window = get_u64(in);
    spec.pool.stride = get_u64(in);
    spec.pool.pad = get_u64(in);
    spec.branches = BranchSet::from_mask(get_u8(in));
    spec.sn_window = get_u64(in);
    spec.num_classes = get_u64(in);
    spec.bn_epsilon = get_f64(in);
    spec.bn_momentum = get_f64(in);
    spec.center_input = get_u8(in) != 0;
    spec.normalize_descriptor = get_u8(in) != 0;
    try {
        spec.validate();
    } catch (const Error& e) {
        throw FormatError(std::string("model file: invalid network spec: ") + e.what());
    }
    return spec;
}

void write_model(std::ostream& out, QdModel& model, const ModelMetadata& meta) {
    using namespace binary;
    out.write(kModelMagic, 4);
    put_u32(out, kModelFormatVersion);
    write_spec(out, model.spec);
    put_u64(out, meta.config_hash);
    put_u64(out, meta.steps);
    put_u64(out, meta.final_loss.size());
    for (const auto& [letter, loss] : meta.final_loss) {
        put_u8(out, static_cast<std::uint8_t>(letter));
        put_f64(out, loss);
    }
    put_u64(out, model.branches.size());
    for (BranchNetwork& net : model.branches) {
        put_u8(out, static_cast<std::uint8_t>(direction_letter(net.direction())));
        const auto entries = collect_tensors(net);
        put_u64(out, entries.size());
        for (const NamedTensor& e : entries) {
            put_u8(out, e.kind);
            put_string(out, e.name);
            write_tensor(out, *e.tensor);
        }
    }
    if (!out) throw Error("model file: write failed");
}

ModelFile read_model(std::istream& in) {
    using namespace binary;
    char magic[4] = {};
    read_exact(in, magic, 4);
    if (!std::equal(magic, magic + 4, kModelMagic)) throw FormatError("model file: bad magic");
    const std::uint32_t version = get_u32(in);
    if (version != kModelFormatVersion) {
        throw FormatError("model file: version " + std::to_string(version) + " not supported (expected " +
                          std::to_string(kModelFormatVersion) + ")");
    }
    const NetworkSpec spec = read_spec(in);
    ModelFile file{QdModel(spec), {}};
    file.metadata.config_hash = get_u64(in);
    file.metadata.steps = get_u64(in);
    const std::uint64_t n_losses = get_u64(in);
    if (n_losses > 4) throw FormatError("model file: too many loss entries");
    for (std::uint64_t i = 0; i < n_losses; ++i) {
        const char letter = static_cast<char>(get_u8(in));
        file.metadata.final_loss[letter] = get_f64(in);
    }
    const std::uint64_t n_branches = get_u64(in);
    if (n_branches != file.model.branches.size()) throw FormatError("model file: branch count does not match spec");
    for (BranchNetwork& net : file.model.branches) {
        const char letter = static_cast<char>(get_u8(in));
        if (letter != direction_letter(net.direction())) throw FormatError("model file: branch order mismatch");
        const auto entries = collect_tensors(net);
        if (get_u64(in) != entries.size()) throw FormatError("model file: tensor count mismatch in branch " +
                                                             std::string(1, letter));
        for (const NamedTensor& e : entries) {
            const std::uint8_t kind = get_u8(in);
            const std::string name = get_string(in);
            if (kind != e.kind || name != e.name) {
                throw FormatError("model file: expected tensor '" + e.name + "', found '" + name + "'");
            }
            Tensor4 t = read_tensor(in);
            if (t.shape() != e.tensor->shape()) {
                throw FormatError("model file: tensor '" + name + "' has shape " + t.shape().str() + ", expected " +
                                  e.tensor->shape().str());
            }
            *e.tensor = std::move(t);
        }
    }
    if (in.peek() != std::char_traits<char>::eof()) throw FormatError("model file: trailing bytes");
    return file;
}

void save_model(const fs::path& path, QdModel& model, const ModelMetadata& meta) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot open " + path.string() + " for writing");
    write_model(out, model, meta);
}

ModelFile load_model(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open model file " + path.string());
    return read_model(in);
}

// ---------------------------------------------------------------------------
// Images
// ---------------------------------------------------------------------------

RgbImage read_png(const fs::path& path) {
    png_image img{};
    img.version = PNG_IMAGE_VERSION;
    if (!png_image_begin_read_from_file(&img, path.c_str())) {
        const std::string msg = img.message;
        png_image_free(&img);
        throw FormatError("cannot decode PNG " + path.string() + ": " + msg);
    }
    img.format = PNG_FORMAT_RGB;
    RgbImage out;
    out.width = img.width;
    out.height = img.height;
    out.pixels.resize(PNG_IMAGE_SIZE(img));
    if (!png_image_finish_read(&img, nullptr, out.pixels.data(), 0, nullptr)) {
        const std::string msg = img.message;
        png_image_free(&img);
        throw FormatError("cannot decode PNG " + path.string() + ": " + msg);
    }
    return out;
}

void write_png(const fs::path& path, const RgbImage& image) {
    if (image.pixels.size() != image.width * image.height * 3) throw ShapeError("write_png: pixel buffer size");
    png_image img{};
    img.version = PNG_IMAGE_VERSION;
    img.width = static_cast<png_uint_32>(image.width);
    img.height = static_cast<png_uint_32>(image.height);
    img.format = PNG_FORMAT_RGB;
    if (!png_image_write_to_file(&img, path.c_str(), 0, image.pixels.data(), 0, nullptr)) {
        const std::string msg = img.message;
        png_image_free(&img);
        throw Error("cannot write PNG " + path.string() + ": " + msg);
    }
}

Tensor4 to_tensor(const RgbImage& image) {
    Tensor4 t(Shape{1, image.height, image.width, 3});
    auto d = t.data();
    for (std::size_t i = 0; i < image.pixels.size(); ++i) d[i] = static_cast<double>(image.pixels[i]) / 255.0;
    return t;
}

RgbImage to_rgb(const Tensor4& image) {
    const Shape& s = image.shape();
    if (s.n != 1 || s.c != 3) throw ShapeError("to_rgb: expected (1, h, w, 3), got " + s.str());
    RgbImage out{s.w, s.h, std::vector<std::uint8_t>(image.size())};
    const auto d = image.data();
    for (std::size_t i = 0; i < d.size(); ++i)
        out.pixels[i] = static_cast<std::uint8_t>(std::lround(std::clamp(d[i], 0.0, 1.0) * 255.0));
    return out;
}

Tensor4 resize_bilinear(const Tensor4& image, std::size_t size) {
    const Shape& s = image.shape();
    if (size == 0) throw ShapeError("resize_bilinear: target size must be positive");
    if (s.h == size && s.w == size) return image;
    Tensor4 out(Shape{s.n, size, size, s.c});
    const auto src = image.data();
    auto dst = out.data();
    auto coord = [size](std::size_t o, std::size_t in_len, std::size_t& lo, std::size_t& hi, double& frac) {
        const double scale = static_cast<double>(in_len) / static_cast<double>(size);
        const double p = std::clamp((static_cast<double>(o) + 0.5) * scale - 0.5, 0.0,
                                    static_cast<double>(in_len) - 1.0);
        lo = static_cast<std::size_t>(std::floor(p));
        hi = std::min(lo + 1, in_len - 1);
        frac = p - static_cast<double>(lo);
    };
    for (std::size_t i = 0; i < s.n; ++i) {
        for (std::size_t y = 0; y < size; ++y) {
            std::size_t y0 = 0, y1 = 0;
            double fy = 0.0;
            coord(y, s.h, y0, y1, fy);
            for (std::size_t x = 0; x < size; ++x) {
                std::size_t x0 = 0, x1 = 0;
                double fx = 0.0;
                coord(x, s.w, x0, x1, fx);
                for (std::size_t k = 0; k < s.c; ++k) {
                    const double top = (1 - fx) * src[image.offset(i, y0, x0, k)] + fx * src[image.offset(i, y0, x1, k)];
                    const double bot = (1 - fx) * src[image.offset(i, y1, x0, k)] + fx * src[image.offset(i, y1, x1, k)];
                    dst[out.offset(i, y, x, k)] = (1 - fy) * top + fy * bot;
                }
            }
        }
    }
    return out;
}

Tensor4 load_image(const fs::path& path, std::size_t size) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open image " + path.string());
    char magic[8] = {};
    in.read(magic, 8);
    const auto got = static_cast<std::size_t>(in.gcount());
    in.clear();
    in.seekg(0);
    if (got >= 4 && std::string_view(magic, 4) == "QDT1") {
        Tensor4 t = read_tensor(in);
        if (t.shape().n != 1 || t.shape().c != 3) {
            throw FormatError("image " + path.string() + ": QDT1 image must be (1, h, w, 3), got " + t.shape().str());
        }
        return resize_bilinear(t, size);
    }
    if (got == 8 && png_sig_cmp(reinterpret_cast<png_const_bytep>(magic), 0, 8) == 0) {
        in.close();
        return resize_bilinear(to_tensor(read_png(path)), size);
    }
    throw FormatError("image " + path.string() + ": unsupported format (expected PNG or QDT1)");
}

// ---------------------------------------------------------------------------
// Synthetic dataset
// ---------------------------------------------------------------------------

namespace {

struct IdentityLook {
    double base[3];
    double stripe[3];
    double blob[3];
    double angle;
    double frequency;
    double phase;
    double blob_x, blob_y, blob_r;
};

IdentityLook identity_look(const SynthOptions& opts, std::size_t id) {
    std::mt19937_64 rng = make_stream(opts.seed, 0x1000000ull + id);
    std::uniform_real_distribution<double> colour(0.05, 0.95);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    IdentityLook look{};
    for (double& c : look.base) c = colour(rng);
    for (double& c : look.stripe) c = colour(rng);
    for (double& c : look.blob) c = colour(rng);
    look.angle = unit(rng) * std::numbers::pi;
    look.frequency = 1.0 + 2.5 * unit(rng);
    look.phase = unit(rng) * 2.0 * std::numbers::pi;
    look.blob_x = -0.4 + 0.8 * unit(rng);
    look.blob_y = -0.4 + 0.8 * unit(rng);
    look.blob_r = 0.2 + 0.2 * unit(rng);
    return look;
}

std::string id_name(std::size_t id) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "v%03zu", id);
    return buf;
}

std::string sample_name(std::size_t id, std::size_t index) {
    char buf[48];
    std::snprintf(buf, sizeof buf, "v%03zu_%03zu", id, index);
    return buf;
}

}  // namespace

RgbImage render_synthetic(const SynthOptions& opts, std::size_t id, std::size_t index) {
    const IdentityLook look = identity_look(opts, id);
    std::mt19937_64 rng = make_stream(opts.seed, (static_cast<std::uint64_t>(id) << 20) + index);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    std::normal_distribution<double> noise(0.0, 0.03);
    const bool mirror = unit(rng) < 0.5;
    const double theta = (unit(rng) * 2.0 - 1.0) * 10.0 * std::numbers::pi / 180.0;
    const double brightness = 0.8 + 0.4 * unit(rng);
    const double shift_x = (unit(rng) * 2.0 - 1.0) * 0.1;
    const double shift_y = (unit(rng) * 2.0 - 1.0) * 0.1;
    const double cos_t = std::cos(theta), sin_t = std::sin(theta);
    const double dir_x = std::cos(look.angle), dir_y = std::sin(look.angle);

    const std::size_t s = opts.size;
    RgbImage img{s, s, std::vector<std::uint8_t>(s * s * 3)};
    for (std::size_t y = 0; y < s; ++y) {
        for (std::size_t x = 0; x < s; ++x) {
            // Pixel centre in [-1, 1], then undo shift, rotation and mirror.
            const double px = 2.0 * (static_cast<double>(x) + 0.5) / static_cast<double>(s) - 1.0 - shift_x;
            const double py = 2.0 * (static_cast<double>(y) + 0.5) / static_cast<double>(s) - 1.0 - shift_y;
            double u = cos_t * px + sin_t * py;
            const double v = -sin_t * px + cos_t * py;
            if (mirror) u = -u;
            const double wave = 0.5 + 0.5 * std::sin(2.0 * std::numbers::pi * look.frequency * (u * dir_x + v * dir_y) +
                                                     look.phase);
            const double dx = u - look.blob_x, dy = v - look.blob_y;
            const double inside = std::clamp((look.blob_r - std::sqrt(dx * dx + dy * dy)) * s * 0.5, 0.0, 1.0);
            for (std::size_t k = 0; k < 3; ++k) {
                const double body = look.base[k] * (1.0 - wave) + look.stripe[k] * wave;
                const double value = (body * (1.0 - inside) + look.blob[k] * inside) * brightness + noise(rng);
                img.pixels[(y * s + x) * 3 + k] = static_cast<std::uint8_t>(std::lround(std::clamp(value, 0.0, 1.0) * 255.0));
            }
        }
    }
    return img;
}

Manifest synthetic_manifest(const SynthOptions& opts) {
    if (opts.ids < 2) throw ConfigError("synth: need at least 2 identities");
    if (opts.per_id < 1) throw ConfigError("synth: need at least 1 image per identity");
    if (opts.size < 4) throw ConfigError("synth: image size must be at least 4");
    Manifest m;
    const std::size_t n_train = opts.ids / 2;
    for (std::size_t id = 0; id < opts.ids; ++id) {
        for (std::size_t j = 0; j < opts.per_id; ++j) {
            Record r;
            r.sample_id = sample_name(id, j);
            r.image_path = "images/" + r.sample_id + ".png";
            r.vehicle_id = id_name(id);
            r.camera_id = j % 2 == 0 ? "c1" : "c2";
            if (id < n_train) r.role = Role::train;
            else r.role = j < 2 ? Role::query : Role::gallery;
            m.records.push_back(std::move(r));
        }
    }
    return m;
}

Manifest write_synthetic_dataset(const SynthOptions& opts, const fs::path& out_dir) {
    Manifest m = synthetic_manifest(opts);
    fs::create_directories(out_dir / "images");
    for (std::size_t id = 0; id < opts.ids; ++id)
        for (std::size_t j = 0; j < opts.per_id; ++j)
            write_png(out_dir / "images" / (sample_name(id, j) + ".png"), render_synthetic(opts, id, j));
    m.base_dir = out_dir;
    save_manifest(out_dir / "manifest.csv", m);
    return m;
}

// ---------------------------------------------------------------------------
// Descriptor archive
// ---------------------------------------------------------------------------

fs::path index_path_for(const fs::path& features) {
    fs::path p = features;
    p += ".index.csv";
    return p;
}

void save_descriptors(const fs::path& path, const DescriptorTable& table, const std::vector<std::string>& order) {
    if (order.empty()) throw DataError("no descriptors to write");
    const std::size_t dim = table.at(order.front()).size();
    Tensor4 all(Shape{order.size(), 1, 1, dim});
    auto d = all.data();
    std::ofstream index(index_path_for(path));
    if (!index) throw Error("cannot open " + index_path_for(path).string() + " for writing");
    index << "sample_id,row\n";
    for (std::size_t row = 0; row < order.size(); ++row) {
        const FeatureVector& v = table.at(order[row]);
        if (v.size() != dim) throw ShapeError("descriptor length differs for " + order[row]);
        std::copy(v.begin(), v.end(), d.begin() + static_cast<std::ptrdiff_t>(row * dim));
        index << order[row] << ',' << row << '\n';
    }
    save_tensor(path, all);
}

DescriptorTable load_descriptors(const fs::path& path) {
    if (!fs::exists(path)) throw DataError("features file not found: " + path.string());
    const Tensor4 all = load_tensor(path);
    const std::size_t rows = all.shape().n;
    const std::size_t dim = all.shape().h * all.shape().w * all.shape().c;
    std::ifstream index(index_path_for(path));
    if (!index) throw DataError("index file not found: " + index_path_for(path).string());
    DescriptorTable table;
    const auto d = all.data();
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(index, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty() || line.rfind("sample_id", 0) == 0) continue;
        const auto comma = line.find(',');
        if (comma == std::string::npos) throw FormatError("index line " + std::to_string(line_no) + ": expected id,row");
        const std::string id = line.substr(0, comma);
        const std::string row_text = line.substr(comma + 1);
        std::size_t row = 0;
        const auto [ptr, ec] = std::from_chars(row_text.data(), row_text.data() + row_text.size(), row);
        if (ec != std::errc{} || ptr != row_text.data() + row_text.size() || row >= rows) {
            throw FormatError("index line " + std::to_string(line_no) + ": bad row '" + row_text + "'");
        }
        const auto begin = d.begin() + static_cast<std::ptrdiff_t>(row * dim);
        if (!table.emplace(id, FeatureVector(begin, begin + static_cast<std::ptrdiff_t>(dim))).second) {
            throw FormatError("index: duplicate sample_id " + id);
        }
    }
    return table;
}

}  // namespace qdfl
