#pragma once

// Procedural skeleton/creature toy domains, analytic class and orientation detectors, and
// manifests over `<root>/<domain>/<class>/<file>.png` trees.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "r2i/image.hpp"

namespace r2i {

namespace fs = std::filesystem;

enum class Orientation { left, right, unknown };

inline const char* to_string(Orientation o) {
  return o == Orientation::left ? "left" : o == Orientation::right ? "right" : "unknown";
}

inline Orientation parse_orientation(const std::string& s) {
  if (s == "left") return Orientation::left;
  if (s == "right") return Orientation::right;
  if (s == "unknown") return Orientation::unknown;
  throw std::invalid_argument("unknown orientation '" + s + "'");
}

enum class Domain { skeleton, creature };

inline const char* to_string(Domain d) { return d == Domain::skeleton ? "skeleton" : "creature"; }

inline constexpr int toy_class_count = 6;
inline constexpr std::int64_t toy_image_size = 32;
inline constexpr float luma_threshold = 0.25f;  // in [0,1] units

inline std::string toy_class_name(int class_id) { return std::to_string(class_id + 1) + "-spike"; }

inline std::vector<std::string> toy_class_names() {
  std::vector<std::string> out;
  for (int c = 0; c < toy_class_count; ++c) out.push_back(toy_class_name(c));
  return out;
}

struct GlyphJitter {
  int cx = 16, cy = 17;  // body centre
  int radius = 7;
  int spike_length = 4;
  double tone = 0.0;  // hue offset (creature) or brightness offset (skeleton)

  auto operator<=>(const GlyphJitter&) const = default;
};

struct GlyphSpec {
  int class_id = 0;  // spike count - 1
  Orientation orientation = Orientation::right;
  GlyphJitter jitter;
  Domain domain = Domain::creature;
};

namespace detail {

inline void hsv_to_rgb(double h, double s, double v, double rgb[3]) {
  h = std::fmod(h, 1.0);
  if (h < 0) h += 1.0;
  const double hh = h * 6.0;
  const int i = static_cast<int>(hh) % 6;
  const double f = hh - std::floor(hh);
  const double p = v * (1 - s), q = v * (1 - s * f), t = v * (1 - s * (1 - f));
  const double table[6][3] = {{v, t, p}, {q, v, p}, {p, v, t}, {p, q, v}, {t, p, v}, {v, p, q}};
  for (int k = 0; k < 3; ++k) rgb[k] = table[i][k];
}

struct Canvas {
  std::int64_t size;
  std::vector<double> rgb;  // [0,1]

  explicit Canvas(std::int64_t s) : size(s), rgb(static_cast<std::size_t>(s * s * 3), 0.0) {}

  void set(int x, int y, const double c[3]) {
    if (x < 0 || y < 0 || x >= size || y >= size) return;
    for (int k = 0; k < 3; ++k) rgb[(y * size + x) * 3 + k] = c[k];
  }

  Tensor tensor() const {
    Tensor t({size, size, 3});
    for (std::size_t i = 0; i < rgb.size(); ++i) t[i] = from_byte(static_cast<std::uint8_t>(std::lround(rgb[i] * 255.0)));
    return t;
  }
};

/// Spike column offsets, symmetric about the body centre with 2 px spacing.
inline std::vector<int> spike_offsets(int n) {
  std::vector<int> out;
  for (int i = 0; i < n; ++i) out.push_back(2 * i - (n - 1));
  return out;
}

}  // namespace detail

/// Renders one 32x32 glyph. The topmost foreground row holds exactly the spike tips, and the
/// bounding box is symmetric about the body centre while the snout side carries more mass.
inline Tensor render_glyph(const GlyphSpec& g) {
  detail::Canvas cv(toy_image_size);
  const auto& j = g.jitter;
  const int dir = g.orientation == Orientation::right ? 1 : -1;
  const int r = j.radius, cx = j.cx, cy = j.cy;
  const int snout = 3;
  double body[3], accent[3], dark[3] = {0.1, 0.1, 0.12};
  if (g.domain == Domain::creature) {
    detail::hsv_to_rgb(g.class_id / double(toy_class_count) + j.tone, 0.6, 1.0, body);
    detail::hsv_to_rgb(g.class_id / double(toy_class_count) + j.tone, 0.25, 1.0, accent);
  } else {
    const double b = 0.9 + j.tone;
    body[0] = body[1] = body[2] = b;
    accent[0] = accent[1] = accent[2] = b;
  }
  auto inside = [&](int x, int y) { return (x - cx) * (x - cx) + (y - cy) * (y - cy) <= r * r; };

  for (int y = cy - r; y <= cy + r; ++y)
    for (int x = cx - r; x <= cx + r; ++x) {
      if (!inside(x, y)) continue;
      if (g.domain == Domain::creature) {
        cv.set(x, y, body);
      } else {
        const bool edge = !inside(x - 1, y) || !inside(x + 1, y) || !inside(x, y - 1) || !inside(x, y + 1);
        if (edge) cv.set(x, y, body);
      }
    }
  // Spikes run from the shared tip row down to the body surface.
  const int tip = cy - r - j.spike_length;
  for (int o : detail::spike_offsets(g.class_id + 1))
    for (int y = tip; y < cy && !inside(cx + o, y); ++y) cv.set(cx + o, y, body);
  // Snout: filled block on the facing side; tail: thin line of equal reach on the back.
  for (int y = cy; y < cy + 6; ++y)
    for (int x = r - 2; x <= r + snout; ++x) cv.set(cx + dir * x, y, body);
  for (int x = r; x <= r + snout; ++x) cv.set(cx - dir * x, cy, body);

  const int ex = cx + dir * (r / 2), ey = cy - 2;
  if (g.domain == Domain::creature) {
    for (int y = cy - r + 1; y <= cy + r - 1; y += 3)
      for (int x = cx - dir * 2; std::abs(x - cx) < r; x -= dir)
        if (inside(x, y) && inside(x, y - 1) && inside(x, y + 1)) cv.set(x, y, dark);
    const double white[3] = {1.0, 1.0, 1.0};
    cv.set(ex, ey, white);
    cv.set(ex + dir, ey, white);
    cv.set(ex, ey + 1, accent);
    cv.set(ex + dir, ey + 1, accent);
  } else {
    for (int y = ey - 1; y <= ey + 1; ++y)
      for (int x = ex - 1; x <= ex + 1; ++x)
        if (x != ex || y != ey) cv.set(x, y, accent);
  }
  return cv.tensor();
}

/// Foreground mask: luma above the threshold. Pixels are in [-1,1].
inline std::vector<std::uint8_t> foreground_mask(const Tensor& img) {
  if (img.rank() != 3 || img.dim(2) != 3) throw ShapeError("expected [H,W,3] image, got " + shape_string(img.shape()));
  const std::size_t n = static_cast<std::size_t>(img.dim(0) * img.dim(1));
  std::vector<std::uint8_t> m(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double l = 0.299 * img[3 * i] + 0.587 * img[3 * i + 1] + 0.114 * img[3 * i + 2];
    m[i] = (l + 1.0) * 0.5 > luma_threshold;
  }
  return m;
}

class NoSubjectError : public std::runtime_error {
 public:
  NoSubjectError() : std::runtime_error("no subject") {}
};

/// Sign of (foreground centroid - bounding-box centre) along x.
inline Orientation orientation_of(const Tensor& img) {
  const auto m = foreground_mask(img);
  const std::int64_t h = img.dim(0), w = img.dim(1);
  std::int64_t lo = w, hi = -1, count = 0;
  double sx = 0;
  for (std::int64_t y = 0; y < h; ++y)
    for (std::int64_t x = 0; x < w; ++x)
      if (m[y * w + x]) {
        lo = std::min(lo, x);
        hi = std::max(hi, x);
        sx += double(x);
        ++count;
      }
  if (count == 0) throw NoSubjectError();
  const double offset = sx / double(count) - 0.5 * double(lo + hi);
  if (offset == 0.0) throw std::runtime_error("orientation is ambiguous (centroid on box centre)");
  return offset > 0 ? Orientation::right : Orientation::left;
}

/// Class from the number of foreground runs in the topmost foreground row; -1 if not 1..6.
inline int spike_class_of(const Tensor& img) {
  const auto m = foreground_mask(img);
  const std::int64_t h = img.dim(0), w = img.dim(1);
  for (std::int64_t y = 0; y < h; ++y) {
    int runs = 0;
    for (std::int64_t x = 0; x < w; ++x)
      if (m[y * w + x] && (x == 0 || !m[y * w + x - 1])) ++runs;
    if (runs == 0) continue;
    return runs >= 1 && runs <= toy_class_count ? runs - 1 : -1;
  }
  throw NoSubjectError();
}

enum class Split { train, test };

inline const char* to_string(Split s) { return s == Split::train ? "train" : "test"; }

struct ManifestRecord {
  std::string path;  // relative to the root, '/'-separated
  std::string domain;
  std::string class_name;
  int class_id = 0;
  Orientation orientation = Orientation::unknown;
  Split split = Split::train;

  bool operator==(const ManifestRecord&) const = default;
};

struct DatasetManifest {
  fs::path root;
  std::vector<std::string> class_names;
  std::vector<ManifestRecord> records;
  std::vector<std::string> warnings;

  std::vector<ManifestRecord> select(const std::string& domain, Split split) const {
    std::vector<ManifestRecord> out;
    for (const auto& r : records)
      if (r.domain == domain && r.split == split) out.push_back(r);
    return out;
  }
};

/// 64-bit FNV-1a.
inline std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline constexpr double default_test_fraction = 0.1;

/// Test split iff the filename hash falls in the lowest `test_fraction` of buckets.
inline Split split_of(const std::string& filename, double test_fraction = default_test_fraction) {
  return static_cast<double>(fnv1a(filename) % 10000) < test_fraction * 10000.0 ? Split::test : Split::train;
}

inline std::string uuid4(std::mt19937_64& rng) {
  const std::uint64_t a = rng(), b = rng();
  unsigned char bytes[16];
  for (int i = 0; i < 8; ++i) {
    bytes[i] = static_cast<unsigned char>(a >> (8 * i));
    bytes[8 + i] = static_cast<unsigned char>(b >> (8 * i));
  }
  bytes[6] = (bytes[6] & 0x0f) | 0x40;
  bytes[8] = (bytes[8] & 0x3f) | 0x80;
  char buf[37];
  std::snprintf(buf, sizeof buf, "%02x%02x%02x%02x-%02x%02x-%02x%02x-%02x%02x-%02x%02x%02x%02x%02x%02x", bytes[0],
                bytes[1], bytes[2], bytes[3], bytes[4], bytes[5], bytes[6], bytes[7], bytes[8], bytes[9], bytes[10],
                bytes[11], bytes[12], bytes[13], bytes[14], bytes[15]);
  return buf;
}

struct ToyCounts {
  int train = 1080;
  int test = 121;
};

inline std::uint64_t domain_seed(std::uint64_t seed, Domain d) {
  std::seed_seq ss{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                   static_cast<std::uint32_t>(d == Domain::skeleton ? 0x5e1e : 0xc8ea)};
  std::uint32_t out[2];
  ss.generate(out, out + 2);
  return (std::uint64_t(out[0]) << 32) | out[1];
}

inline GlyphJitter sample_jitter(Domain d, std::mt19937_64& rng) {
  GlyphJitter j;
  j.cx = std::uniform_int_distribution<int>(14, 18)(rng);
  j.cy = std::uniform_int_distribution<int>(15, 19)(rng);
  j.radius = std::uniform_int_distribution<int>(6, 8)(rng);
  j.spike_length = std::uniform_int_distribution<int>(4, 5)(rng);
  j.tone = d == Domain::creature ? std::uniform_real_distribution<double>(-0.03, 0.03)(rng)
                                 : std::uniform_real_distribution<double>(-0.1, 0.1)(rng);
  return j;
}

/// One generated glyph with its file stem and split.
struct ToySample {
  GlyphSpec spec;
  std::string uuid;
  Split split = Split::train;
};

/// Deterministic plan of every toy image; domains draw from independent seeds.
inline std::vector<ToySample> plan_toy_dataset(std::uint64_t seed, ToyCounts counts, Domain d) {
  if (counts.train < toy_class_count || counts.test < toy_class_count) {
    throw std::invalid_argument("toy dataset needs at least " + std::to_string(toy_class_count) +
                                " images per split and domain");
  }
  std::mt19937_64 rng(domain_seed(seed, d));
  std::vector<ToySample> out;
  for (Split split : {Split::train, Split::test}) {
    const int n = split == Split::train ? counts.train : counts.test;
    for (int i = 0; i < n; ++i) {
      ToySample s;
      s.split = split;
      s.spec.domain = d;
      s.spec.class_id = i % toy_class_count;
      s.spec.orientation = std::bernoulli_distribution(0.5)(rng) ? Orientation::right : Orientation::left;
      s.spec.jitter = sample_jitter(d, rng);
      do s.uuid = uuid4(rng);
      while (split_of(s.uuid + ".png") != split);
      out.push_back(std::move(s));
    }
  }
  return out;
}

inline std::string record_path(const std::string& domain, const std::string& class_name, const std::string& stem) {
  return domain + "/" + class_name + "/" + stem + ".png";
}

inline nlohmann::json to_json(const ManifestRecord& r) {
  return {{"path", r.path}, {"domain", r.domain}, {"class", r.class_name},
          {"orientation", to_string(r.orientation)}, {"split", to_string(r.split)}};
}

inline void write_manifest_jsonl(const fs::path& file, const DatasetManifest& m) {
  std::ofstream out(file);
  for (const auto& r : m.records) out << to_json(r).dump() << '\n';
  if (!out) throw std::runtime_error("cannot write manifest " + file.string());
}

inline DatasetManifest read_manifest_jsonl(const fs::path& file) {
  std::ifstream in(file);
  if (!in) throw std::runtime_error("cannot open manifest " + file.string());
  DatasetManifest m;
  m.root = file.parent_path();
  std::set<std::string> classes;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto j = nlohmann::json::parse(line);
    ManifestRecord r;
    r.path = j.at("path");
    r.domain = j.at("domain");
    r.class_name = j.at("class");
    r.orientation = parse_orientation(j.at("orientation"));
    const std::string split = j.at("split");
    if (split != "train" && split != "test") throw std::invalid_argument("bad split '" + split + "' in manifest");
    r.split = split == "test" ? Split::test : Split::train;
    classes.insert(r.class_name);
    m.records.push_back(std::move(r));
  }
  m.class_names.assign(classes.begin(), classes.end());
  for (auto& r : m.records)
    r.class_id = static_cast<int>(std::lower_bound(m.class_names.begin(), m.class_names.end(), r.class_name) -
                                  m.class_names.begin());
  return m;
}

/// Writes the toy tree and `manifest.jsonl` under `root`. Each image is re-checked with the
/// analytic detectors before it is written.
inline DatasetManifest gen_toy_dataset(const fs::path& root, std::uint64_t seed, ToyCounts counts = {}) {
  DatasetManifest m;
  m.root = root;
  m.class_names = toy_class_names();
  for (Domain d : {Domain::skeleton, Domain::creature}) {
    for (const auto& s : plan_toy_dataset(seed, counts, d)) {
      const Tensor img = render_glyph(s.spec);
      if (spike_class_of(img) != s.spec.class_id || orientation_of(img) != s.spec.orientation) {
        throw std::logic_error("renderer produced an image its detectors disagree with");
      }
      ManifestRecord r;
      r.domain = to_string(d);
      r.class_name = toy_class_name(s.spec.class_id);
      r.class_id = s.spec.class_id;
      r.orientation = s.spec.orientation;
      r.split = s.split;
      r.path = record_path(r.domain, r.class_name, s.uuid);
      write_png(root / r.path, img);
      m.records.push_back(std::move(r));
    }
  }
  std::sort(m.records.begin(), m.records.end(), [](const auto& a, const auto& b) { return a.path < b.path; });
  write_manifest_jsonl(root / "manifest.jsonl", m);
  return m;
}

/// Scans `<root>/<domain>/<class>/*.png`. Classes are the sorted union of class directory
/// names; orientation is inferred by the detector ("unknown" when it cannot decide).
inline DatasetManifest load_manifest(const fs::path& root, double test_fraction = default_test_fraction) {
  if (!fs::is_directory(root)) throw std::invalid_argument("dataset root " + root.string() + " is not a directory");
  DatasetManifest m;
  m.root = root;
  std::vector<fs::path> domains;
  for (const auto& e : fs::directory_iterator(root))
    if (e.is_directory()) domains.push_back(e.path());
  std::sort(domains.begin(), domains.end());
  std::set<std::string> classes;
  std::map<std::pair<std::int64_t, std::int64_t>, std::vector<std::string>> by_size;
  for (const auto& dom : domains) {
    std::vector<fs::path> class_dirs;
    for (const auto& e : fs::directory_iterator(dom))
      if (e.is_directory()) class_dirs.push_back(e.path());
    std::sort(class_dirs.begin(), class_dirs.end());
    for (const auto& cdir : class_dirs) {
      std::vector<fs::path> files;
      for (const auto& e : fs::directory_iterator(cdir))
        if (e.is_regular_file() && e.path().extension() == ".png") files.push_back(e.path());
      const std::string rel_dir = dom.filename().string() + "/" + cdir.filename().string();
      if (files.empty()) {
        m.warnings.push_back("empty class directory: " + rel_dir);
        continue;
      }
      classes.insert(cdir.filename().string());
      for (const auto& f : files) {
        ManifestRecord r;
        r.path = rel_dir + "/" + f.filename().string();
        r.domain = dom.filename().string();
        r.class_name = cdir.filename().string();
        r.split = split_of(f.filename().string(), test_fraction);
        by_size[png_size(f)].push_back(r.path);
        m.records.push_back(std::move(r));
      }
    }
  }
  if (by_size.size() > 1) {
    std::ostringstream msg;
    msg << "mixed image sizes:";
    for (const auto& [wh, files] : by_size) {
      msg << " [" << wh.first << "x" << wh.second << ":";
      for (const auto& f : files) msg << ' ' << f;
      msg << ']';
    }
    throw std::invalid_argument(msg.str());
  }
  m.class_names.assign(classes.begin(), classes.end());
  for (auto& r : m.records) {
    r.class_id = static_cast<int>(std::lower_bound(m.class_names.begin(), m.class_names.end(), r.class_name) -
                                  m.class_names.begin());
    try {
      r.orientation = orientation_of(read_png(root / r.path));
    } catch (const ImageError&) {
      throw;
    } catch (const std::exception&) {
      r.orientation = Orientation::unknown;
    }
  }
  std::sort(m.records.begin(), m.records.end(), [](const auto& a, const auto& b) { return a.path < b.path; });
  return m;
}

/// Stacks the images of `records` into [N,H,W,3] in [-1,1].
inline Tensor load_images(const fs::path& root, const std::vector<ManifestRecord>& records) {
  if (records.empty()) return Tensor();
  std::vector<Tensor> imgs;
  imgs.reserve(records.size());
  for (const auto& r : records) imgs.push_back(unsqueeze0(read_png(root / r.path)));
  return stack_batch<float>(imgs);
}

inline std::vector<int> class_ids(const std::vector<ManifestRecord>& records) {
  std::vector<int> out;
  for (const auto& r : records) out.push_back(r.class_id);
  return out;
}

}  // namespace r2i
