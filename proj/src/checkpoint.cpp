#include "clim/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <map>
#include <sstream>

#include "clim/error.hpp"
#include "clim/tensor_io.hpp"

namespace clim {

namespace {
constexpr char kIndexMagic[8] = {'C', 'L', 'I', 'M', 'I', 'D', 'X', '1'};

const char* stem_name(StemKind s) { return s == StemKind::mlp ? "mlp" : "conv"; }
}  // namespace

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
  const ParamsD& p = ckpt.params;
  std::vector<float> values;
  values.reserve(p.parameter_count());
  std::ostringstream index;
  const EncoderDims& d = p.dims;
  index << "encoder stem=" << stem_name(d.stem) << " input_side=" << d.input_side << " channels=" << d.channels
        << " conv_channels=" << d.conv_channels << " hidden=" << d.hidden << " feat=" << d.feat
        << " mlp_hidden=" << d.mlp_hidden << " embed=" << d.embed << " view_side=" << ckpt.view_side << "\n";
  visit_blocks(p, [&](const std::string& name, const auto& block) {
    index << "block " << name << ' ' << block.rows() << ' ' << block.cols() << ' ' << values.size() << "\n";
    for (Eigen::Index r = 0; r < block.rows(); ++r)
      for (Eigen::Index c = 0; c < block.cols(); ++c) values.push_back(float(block(r, c)));
  });

  TensorHeader h;
  h.n = 1;
  h.height = 1;
  h.width = std::uint32_t(values.size());
  h.channels = 1;
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError(IoErrc::open_failed, "cannot write " + path.string());
  write_tensor_record(out, h, values, {});
  const std::string text = index.str();
  out.write(kIndexMagic, sizeof(kIndexMagic));
  write_u32_le(out, std::uint32_t(text.size()));
  out.write(text.data(), std::streamsize(text.size()));
  out.flush();
  if (!out) throw IoError(IoErrc::write_failed, path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError(IoErrc::open_failed, "cannot open checkpoint " + path.string());
  TensorRecord rec = read_tensor_record(in);
  char magic[8];
  in.read(magic, sizeof(magic));
  if (in.gcount() != sizeof(magic)) throw IoError(IoErrc::truncated, "checkpoint index missing");
  if (std::memcmp(magic, kIndexMagic, sizeof(magic)) != 0) throw IoError(IoErrc::bad_magic, "expected CLIMIDX1");
  const std::uint32_t len = read_u32_le(in);
  std::string text(len, '\0');
  in.read(text.data(), std::streamsize(len));
  if (std::uint32_t(in.gcount()) != len) throw IoError(IoErrc::truncated, "checkpoint index cut short");

  std::istringstream lines(text);
  std::string line;
  if (!std::getline(lines, line)) throw IoError(IoErrc::malformed_header, "empty checkpoint index");
  std::istringstream head(line);
  std::string word;
  head >> word;
  if (word != "encoder") throw IoError(IoErrc::malformed_header, "checkpoint index must start with 'encoder'");
  std::map<std::string, std::string> kv;
  while (head >> word) {
    const auto eq = word.find('=');
    if (eq == std::string::npos) throw IoError(IoErrc::malformed_header, "bad encoder field '" + word + "'");
    kv[word.substr(0, eq)] = word.substr(eq + 1);
  }
  auto get_int = [&](const char* key) {
    const auto it = kv.find(key);
    if (it == kv.end()) throw IoError(IoErrc::malformed_header, std::string("checkpoint missing ") + key);
    try {
      return std::stoi(it->second);
    } catch (const std::exception&) {
      throw IoError(IoErrc::malformed_header, std::string("checkpoint field ") + key + " is not an integer");
    }
  };
  Checkpoint ckpt;
  EncoderDims d;
  const auto stem = kv.find("stem");
  if (stem == kv.end() || (stem->second != "mlp" && stem->second != "conv")) {
    throw IoError(IoErrc::malformed_header, "checkpoint stem must be mlp or conv");
  }
  d.stem = stem->second == "mlp" ? StemKind::mlp : StemKind::conv;
  d.input_side = get_int("input_side");
  d.channels = get_int("channels");
  d.conv_channels = get_int("conv_channels");
  d.hidden = get_int("hidden");
  d.feat = get_int("feat");
  d.mlp_hidden = get_int("mlp_hidden");
  d.embed = get_int("embed");
  ckpt.view_side = get_int("view_side");
  try {
    d.validate();
  } catch (const ValidationError& e) {
    throw IoError(IoErrc::malformed_header, e.what());
  }

  Rng unused(0);
  ckpt.params = init_params<double>(unused, d);
  std::map<std::string, std::tuple<long, long, std::size_t>> blocks;
  while (std::getline(lines, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string tag, name;
    long rows = 0, cols = 0;
    std::size_t offset = 0;
    if (!(ls >> tag >> name >> rows >> cols >> offset) || tag != "block") {
      throw IoError(IoErrc::malformed_header, "bad index line '" + line + "'");
    }
    blocks[name] = {rows, cols, offset};
  }
  visit_blocks(ckpt.params, [&](const std::string& name, auto& block) {
    const auto it = blocks.find(name);
    if (it == blocks.end()) throw IoError(IoErrc::malformed_header, "checkpoint has no block " + name);
    const auto [rows, cols, offset] = it->second;
    if (rows != block.rows() || cols != block.cols()) throw IoError(IoErrc::size_mismatch, "block " + name + " shape");
    if (offset + std::size_t(rows * cols) > rec.values.size()) throw IoError(IoErrc::truncated, "block " + name);
    std::size_t k = offset;
    for (Eigen::Index r = 0; r < block.rows(); ++r)
      for (Eigen::Index c = 0; c < block.cols(); ++c) block(r, c) = double(rec.values[k++]);
  });
  return ckpt;
}

}  // namespace clim
