#include "clim/dataset.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <map>
#include <sstream>

#include "clim/error.hpp"
#include "clim/numerics.hpp"
#include "clim/tensor_io.hpp"

namespace clim {

namespace fs = std::filesystem;

void Dataset::validate() const {
  if (images.empty()) {
    if (labels && !labels->empty()) throw ValidationError("dataset: labels without images");
    return;
  }
  const Image& first = images.front();
  if (first.channels != 1 && first.channels != 3) {
    throw ValidationError("dataset: channels must be 1 or 3");
  }
  for (const Image& img : images) {
    if (!img.same_shape(first)) throw ValidationError("dataset: images differ in shape");
    if (img.pixels.size() != Eigen::Index(img.height) * img.width * img.channels) {
      throw ValidationError("dataset: pixel buffer does not match shape");
    }
    if (img.pixels.size() > 0 && (img.pixels.minCoeff() < 0.0f || img.pixels.maxCoeff() > 1.0f)) {
      throw ValidationError("dataset: pixel values outside [0,1]");
    }
  }
  if (labels) {
    if (labels->size() != images.size()) throw ValidationError("dataset: label count != image count");
    const int classes = class_count.value_or(std::numeric_limits<int>::max());
    for (int l : *labels) {
      if (l < 0 || l >= classes) throw ValidationError("dataset: label out of range");
    }
  }
}

// ---------------------------------------------------------------------------
// Synthetic generator
// ---------------------------------------------------------------------------

namespace {

void check_spec(const SyntheticSpec& s) {
  if (s.class_count <= 0) throw ValidationError("synthetic: class_count must be positive");
  if (s.per_class <= 0) throw ValidationError("synthetic: per_class must be positive");
  if (s.latent_dim <= 0) throw ValidationError("synthetic: latent_dim must be positive");
  if (s.image_side <= 0) throw ValidationError("synthetic: image_side must be positive");
  if (s.channels != 1 && s.channels != 3) throw ValidationError("synthetic: channels must be 1 or 3");
  if (!(s.blob_stddev >= 0)) throw ValidationError("synthetic: blob_stddev must be non-negative");
}

// Latent -> pixel pre-activation map. Each latent coordinate owns one random
// pattern per channel, drawn on a coarse grid and bilinearly upsampled so that
// crops and rescaling keep the content recognisable.
Eigen::MatrixXd render_map(const SyntheticSpec& s, Rng rng) {
  const int side = s.image_side;
  const int grid = std::max(2, (side + 3) / 4);
  const Eigen::Index pixels = Eigen::Index(side) * side * s.channels;
  Eigen::MatrixXd map(pixels, s.latent_dim);
  Eigen::MatrixXd coarse(grid, grid);
  for (int j = 0; j < s.latent_dim; ++j) {
    for (int c = 0; c < s.channels; ++c) {
      for (int gy = 0; gy < grid; ++gy)
        for (int gx = 0; gx < grid; ++gx) coarse(gy, gx) = rng.normal();
      for (int y = 0; y < side; ++y) {
        const double fy = side == 1 ? 0.0 : double(y) * (grid - 1) / (side - 1);
        const int y0 = std::min(int(fy), grid - 2);
        const double wy = fy - y0;
        for (int x = 0; x < side; ++x) {
          const double fx = side == 1 ? 0.0 : double(x) * (grid - 1) / (side - 1);
          const int x0 = std::min(int(fx), grid - 2);
          const double wx = fx - x0;
          const double v = (1 - wy) * ((1 - wx) * coarse(y0, x0) + wx * coarse(y0, x0 + 1)) +
                           wy * ((1 - wx) * coarse(y0 + 1, x0) + wx * coarse(y0 + 1, x0 + 1));
          map((Eigen::Index(y) * side + x) * s.channels + c, j) = v;
        }
      }
    }
  }
  return map / std::sqrt(double(s.latent_dim));
}

}  // namespace

Eigen::MatrixXd synthetic_class_means(const SyntheticSpec& spec) {
  check_spec(spec);
  Rng rng = Rng(spec.seed).split("class-means");
  Eigen::MatrixXd means(spec.class_count, spec.latent_dim);
  for (int k = 0; k < spec.class_count; ++k)
    for (int j = 0; j < spec.latent_dim; ++j) means(k, j) = rng.normal();
  return means;
}

Dataset generate_synthetic(const SyntheticSpec& spec) {
  check_spec(spec);
  const Rng root(spec.seed);
  const Eigen::MatrixXd means = synthetic_class_means(spec);
  const Eigen::MatrixXd map = render_map(spec, root.split("render-map"));
  Rng rng = root.split("samples");

  Dataset ds;
  ds.class_count = spec.class_count;
  ds.labels.emplace();
  ds.images.reserve(std::size_t(spec.class_count) * spec.per_class);
  ds.labels->reserve(ds.images.capacity());
  Eigen::VectorXd latent(spec.latent_dim);
  for (int k = 0; k < spec.class_count; ++k) {
    for (int i = 0; i < spec.per_class; ++i) {
      for (int j = 0; j < spec.latent_dim; ++j) latent(j) = means(k, j) + spec.blob_stddev * rng.normal();
      const Eigen::VectorXd pre = map * latent;
      Image img(spec.image_side, spec.image_side, spec.channels);
      img.pixels = (1.0 / (1.0 + (-2.0 * pre.array()).exp())).cast<float>();
      ds.images.push_back(std::move(img));
      ds.labels->push_back(k);
    }
  }
  return ds;
}

// ---------------------------------------------------------------------------
// Tensor container
// ---------------------------------------------------------------------------

static_assert(std::endian::native == std::endian::little || std::endian::native == std::endian::big);

namespace {

template <typename T>
T byteswap_if_big(T v) {
  if constexpr (std::endian::native == std::endian::big) {
    auto bytes = std::bit_cast<std::array<unsigned char, sizeof(T)>>(v);
    std::reverse(bytes.begin(), bytes.end());
    return std::bit_cast<T>(bytes);
  } else {
    return v;
  }
}

void write_bytes(std::ostream& out, const void* data, std::size_t n) {
  out.write(static_cast<const char*>(data), std::streamsize(n));
  if (!out) throw IoError(IoErrc::write_failed, "stream write failed");
}

bool read_bytes(std::istream& in, void* data, std::size_t n) {
  in.read(static_cast<char*>(data), std::streamsize(n));
  return std::size_t(in.gcount()) == n;
}

}  // namespace

void write_u32_le(std::ostream& out, std::uint32_t v) {
  v = byteswap_if_big(v);
  write_bytes(out, &v, 4);
}

std::uint32_t read_u32_le(std::istream& in) {
  std::uint32_t v = 0;
  if (!read_bytes(in, &v, 4)) throw IoError(IoErrc::truncated, "unexpected end of file");
  return byteswap_if_big(v);
}

std::uint64_t TensorHeader::element_count() const {
  constexpr std::uint64_t kMaxElements = std::uint64_t{1} << 40;
  std::uint64_t count = 1;
  for (std::uint64_t d : {std::uint64_t(n), std::uint64_t(height), std::uint64_t(width), std::uint64_t(channels)}) {
    if (d != 0 && count > kMaxElements / d) {
      throw IoError(IoErrc::dim_overflow, "n*H*W*C exceeds 2^40 elements");
    }
    count *= d;
  }
  return count;
}

void write_tensor_record(std::ostream& out, const TensorHeader& h, std::span<const float> values,
                         std::span<const std::uint32_t> labels) {
  if (values.size() != h.element_count()) {
    throw ValidationError("tensor record: payload size does not match header");
  }
  if (h.has_labels && labels.size() != h.n) throw ValidationError("tensor record: label count != n");
  write_bytes(out, kTensorMagic, sizeof(kTensorMagic));
  write_u32_le(out, h.version);
  const std::uint8_t flags[2] = {h.dtype, std::uint8_t(h.has_labels ? 1 : 0)};
  write_bytes(out, flags, 2);
  write_u32_le(out, h.n);
  write_u32_le(out, h.height);
  write_u32_le(out, h.width);
  write_u32_le(out, h.channels);
  if constexpr (std::endian::native == std::endian::little) {
    if (!values.empty()) write_bytes(out, values.data(), values.size_bytes());
  } else {
    for (float v : values) {
      const auto bits = byteswap_if_big(std::bit_cast<std::uint32_t>(v));
      write_bytes(out, &bits, 4);
    }
  }
  if (h.has_labels) {
    for (std::uint32_t l : labels) write_u32_le(out, l);
  }
}

TensorRecord read_tensor_record(std::istream& in) {
  char magic[8];
  if (!read_bytes(in, magic, sizeof(magic))) throw IoError(IoErrc::truncated, "file shorter than magic");
  if (std::memcmp(magic, kTensorMagic, sizeof(magic)) != 0) {
    throw IoError(IoErrc::bad_magic, "expected CLIMTNSR");
  }
  TensorRecord rec;
  TensorHeader& h = rec.header;
  h.version = read_u32_le(in);
  if (h.version != 1) throw IoError(IoErrc::bad_version, "unsupported version " + std::to_string(h.version));
  std::uint8_t flags[2];
  if (!read_bytes(in, flags, 2)) throw IoError(IoErrc::truncated, "header cut short");
  h.dtype = flags[0];
  if (h.dtype != 0) throw IoError(IoErrc::bad_dtype, "only dtype 0 (f32) is supported");
  if (flags[1] > 1) throw IoError(IoErrc::malformed_header, "has_labels must be 0 or 1");
  h.has_labels = flags[1] == 1;
  h.n = read_u32_le(in);
  h.height = read_u32_le(in);
  h.width = read_u32_le(in);
  h.channels = read_u32_le(in);

  const std::uint64_t count = h.element_count();
  // Read in bounded chunks so a lying header cannot force a huge allocation.
  constexpr std::uint64_t kChunk = std::uint64_t{1} << 20;
  rec.values.reserve(std::size_t(std::min(count, kChunk)));
  std::uint64_t remaining = count;
  while (remaining > 0) {
    const std::size_t take = std::size_t(std::min(remaining, kChunk));
    const std::size_t offset = rec.values.size();
    rec.values.resize(offset + take);
    if (!read_bytes(in, rec.values.data() + offset, take * sizeof(float))) {
      throw IoError(IoErrc::truncated, "payload shorter than n*H*W*C floats");
    }
    remaining -= take;
  }
  if constexpr (std::endian::native == std::endian::big) {
    for (float& v : rec.values) v = std::bit_cast<float>(byteswap_if_big(std::bit_cast<std::uint32_t>(v)));
  }
  if (h.has_labels) {
    rec.labels.resize(h.n);
    for (auto& l : rec.labels) {
      try {
        l = read_u32_le(in);
      } catch (const IoError&) {
        throw IoError(IoErrc::truncated, "label block shorter than n entries");
      }
    }
  }
  return rec;
}

void save_tensor_file(const Dataset& ds, const fs::path& path) {
  ds.validate();
  TensorHeader h;
  h.has_labels = ds.has_labels();
  h.n = std::uint32_t(ds.size());
  h.height = std::uint32_t(ds.height());
  h.width = std::uint32_t(ds.width());
  h.channels = std::uint32_t(ds.channels());
  std::vector<float> values;
  values.reserve(std::size_t(h.element_count()));
  for (const Image& img : ds.images) values.insert(values.end(), img.pixels.data(), img.pixels.data() + img.size());
  std::vector<std::uint32_t> labels;
  if (ds.labels) labels.assign(ds.labels->begin(), ds.labels->end());

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError(IoErrc::open_failed, "cannot write " + path.string());
  write_tensor_record(out, h, values, labels);
  out.flush();
  if (!out) throw IoError(IoErrc::write_failed, path.string());
}

Dataset load_tensor_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError(IoErrc::open_failed, "cannot open " + path.string());
  TensorRecord rec = read_tensor_record(in);
  const TensorHeader& h = rec.header;
  Dataset ds;
  if (h.n > 0 && h.channels != 1 && h.channels != 3) {
    throw IoError(IoErrc::malformed_header, "channels must be 1 or 3");
  }
  const std::size_t per_image = std::size_t(h.height) * h.width * h.channels;
  ds.images.reserve(h.n);
  for (std::uint32_t i = 0; i < h.n; ++i) {
    Image img(int(h.height), int(h.width), int(h.channels));
    std::copy_n(rec.values.data() + i * per_image, per_image, img.pixels.data());
    ds.images.push_back(std::move(img));
  }
  if (h.has_labels) {
    ds.labels.emplace();
    int max_label = -1;
    for (std::uint32_t l : rec.labels) {
      if (l > std::uint32_t(std::numeric_limits<int>::max())) throw IoError(IoErrc::bad_label, "label too large");
      ds.labels->push_back(int(l));
      max_label = std::max(max_label, int(l));
    }
    ds.class_count = max_label + 1;
  }
  return ds;
}

// ---------------------------------------------------------------------------
// Netpbm P6
// ---------------------------------------------------------------------------

namespace {

// Next whitespace-delimited header token, skipping '#' comments.
std::string next_token(std::istream& in) {
  std::string tok;
  int ch = 0;
  while ((ch = in.get()) != EOF) {
    if (ch == '#') {
      while ((ch = in.get()) != EOF && ch != '\n' && ch != '\r') {
      }
      continue;
    }
    if (std::isspace(ch)) {
      if (!tok.empty()) return tok;
      continue;
    }
    tok.push_back(char(ch));
  }
  return tok;
}

int parse_header_int(std::istream& in, const std::string& what, const fs::path& path) {
  const std::string tok = next_token(in);
  if (tok.empty() || !std::all_of(tok.begin(), tok.end(), [](char c) { return c >= '0' && c <= '9'; }) ||
      tok.size() > 9) {
    throw IoError(IoErrc::malformed_header, path.string() + ": bad " + what);
  }
  return std::stoi(tok);
}

}  // namespace

Image load_ppm(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError(IoErrc::open_failed, "cannot open " + path.string());
  if (next_token(in) != "P6") throw IoError(IoErrc::malformed_header, path.string() + ": not a P6 file");
  const int width = parse_header_int(in, "width", path);
  const int height = parse_header_int(in, "height", path);
  const int maxval = parse_header_int(in, "maxval", path);
  if (width <= 0 || height <= 0 || maxval <= 0 || maxval > 65535) {
    throw IoError(IoErrc::malformed_header, path.string() + ": dimensions or maxval out of range");
  }
  // next_token consumed exactly one whitespace byte after maxval.
  const int bytes_per_sample = maxval < 256 ? 1 : 2;
  const std::size_t count = std::size_t(width) * height * 3;
  std::vector<unsigned char> raw(count * bytes_per_sample);
  if (!read_bytes(in, raw.data(), raw.size())) throw IoError(IoErrc::truncated, path.string());
  Image img(height, width, 3);
  for (std::size_t i = 0; i < count; ++i) {
    const unsigned v = bytes_per_sample == 1 ? raw[i] : (unsigned(raw[2 * i]) << 8) | raw[2 * i + 1];
    if (int(v) > maxval) throw IoError(IoErrc::malformed_header, path.string() + ": sample exceeds maxval");
    img.pixels(Eigen::Index(i)) = float(double(v) / maxval);
  }
  return img;
}

void save_ppm(const Image& img, const fs::path& path) {
  if (img.channels != 1 && img.channels != 3) throw ValidationError("save_ppm: channels must be 1 or 3");
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError(IoErrc::open_failed, "cannot write " + path.string());
  out << "P6\n" << img.width << ' ' << img.height << "\n255\n";
  std::vector<unsigned char> raw(std::size_t(img.width) * img.height * 3);
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x)
      for (int c = 0; c < 3; ++c) {
        const float v = img.at(y, x, img.channels == 3 ? c : 0);
        raw[(std::size_t(y) * img.width + x) * 3 + c] =
            static_cast<unsigned char>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f));
      }
  write_bytes(out, raw.data(), raw.size());
}

Dataset load_ppm_dir(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw IoError(IoErrc::open_failed, dir.string() + " is not a directory");
  std::vector<fs::path> files;
  for (const auto& entry : fs::directory_iterator(dir)) {
    if (entry.is_regular_file() && entry.path().extension() == ".ppm") files.push_back(entry.path());
  }
  std::sort(files.begin(), files.end(),
            [](const fs::path& a, const fs::path& b) { return a.filename().string() < b.filename().string(); });

  Dataset ds;
  for (const auto& f : files) {
    Image img = load_ppm(f);
    if (!ds.images.empty() && !img.same_shape(ds.images.front())) {
      throw IoError(IoErrc::size_mismatch, f.filename().string() + " differs in size from " +
                                               files.front().filename().string());
    }
    ds.images.push_back(std::move(img));
  }

  const fs::path label_path = dir / "labels.txt";
  if (fs::exists(label_path)) {
    std::ifstream in(label_path);
    if (!in) throw IoError(IoErrc::open_failed, label_path.string());
    std::map<std::string, int> by_name;
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
      ++line_no;
      if (!line.empty() && line.back() == '\r') line.pop_back();
      if (line.empty()) continue;
      const auto tab = line.find('\t');
      if (tab == std::string::npos) {
        throw IoError(IoErrc::bad_label, "labels.txt:" + std::to_string(line_no) + ": expected filename<TAB>class");
      }
      const std::string cls = line.substr(tab + 1);
      if (cls.empty() || cls.size() > 9 || !std::all_of(cls.begin(), cls.end(), [](char c) { return c >= '0' && c <= '9'; })) {
        throw IoError(IoErrc::bad_label, "labels.txt:" + std::to_string(line_no) + ": class must be a non-negative integer");
      }
      by_name[line.substr(0, tab)] = std::stoi(cls);
    }
    ds.labels.emplace();
    int max_label = -1;
    for (const auto& f : files) {
      const auto it = by_name.find(f.filename().string());
      if (it == by_name.end()) throw IoError(IoErrc::bad_label, "no label for " + f.filename().string());
      ds.labels->push_back(it->second);
      max_label = std::max(max_label, it->second);
    }
    ds.class_count = max_label + 1;
  }
  return ds;
}

}  // namespace clim
