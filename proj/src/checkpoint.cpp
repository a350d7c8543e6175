#include "adp/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>
#include <stdexcept>

static_assert(std::endian::native == std::endian::little,
              "checkpoint serialization assumes a little-endian host");

namespace adp {

namespace {

constexpr char kMagic[] = "ADPCKPT1";
constexpr size_t kMagicLen = 8;

std::string shape_field(const Shape& shape) {
  std::string out;
  for (size_t i = 0; i < shape.size(); ++i) {
    if (i) out += "x";
    out += std::to_string(shape[i]);
  }
  return out.empty() ? "1" : out;  // rank-0 stored as a single extent
}

}  // namespace

void save_checkpoint(const std::string& path, BranchedModel& model) {
  auto params = model.named_parameters();
  std::string manifest;
  int64_t offset = 0;
  for (const auto& p : params) {
    manifest += p.name + " " + shape_field(p.tensor->shape) + " " + std::to_string(offset) + "\n";
    offset += p.tensor->size();
  }

  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("save_checkpoint: cannot open " + path);
  out.write(kMagic, kMagicLen);
  const std::string len = std::to_string(manifest.size()) + "\n";
  out.write(len.data(), static_cast<std::streamsize>(len.size()));
  out.write(manifest.data(), static_cast<std::streamsize>(manifest.size()));
  for (const auto& p : params) {
    out.write(reinterpret_cast<const char*>(p.tensor->values.data()),
              static_cast<std::streamsize>(p.tensor->values.size() * sizeof(double)));
  }
  if (!out) throw std::runtime_error("save_checkpoint: write failed for " + path);
}

void load_checkpoint(const std::string& path, BranchedModel& model) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("load_checkpoint: cannot open " + path);

  char magic[kMagicLen];
  in.read(magic, kMagicLen);
  if (!in || std::memcmp(magic, kMagic, kMagicLen) != 0) {
    throw std::runtime_error("load_checkpoint: " + path + " is not a checkpoint file");
  }
  std::string len_line;
  if (!std::getline(in, len_line)) {
    throw std::runtime_error("load_checkpoint: truncated header in " + path);
  }
  const size_t manifest_len = static_cast<size_t>(std::stoull(len_line));
  std::string manifest(manifest_len, '\0');
  in.read(manifest.data(), static_cast<std::streamsize>(manifest_len));
  if (!in) throw std::runtime_error("load_checkpoint: truncated manifest in " + path);

  auto params = model.named_parameters();
  std::istringstream lines(manifest);
  std::string line;
  size_t idx = 0;
  std::vector<int64_t> offsets;
  for (; std::getline(lines, line); ++idx) {
    if (idx >= params.size()) {
      throw std::runtime_error("load_checkpoint: extra tensor in checkpoint: " + line);
    }
    std::istringstream fields(line);
    std::string name, shape_text;
    int64_t offset = 0;
    if (!(fields >> name >> shape_text >> offset)) {
      throw std::runtime_error("load_checkpoint: malformed manifest line: " + line);
    }
    if (name != params[idx].name) {
      throw std::runtime_error("load_checkpoint: tensor name mismatch, checkpoint has '" + name +
                               "' but model expects '" + params[idx].name + "'");
    }
    if (shape_text != shape_field(params[idx].tensor->shape)) {
      throw std::runtime_error("load_checkpoint: shape mismatch for '" + name +
                               "', checkpoint has " + shape_text + " but model expects " +
                               shape_field(params[idx].tensor->shape));
    }
    offsets.push_back(offset);
  }
  if (idx != params.size()) {
    throw std::runtime_error("load_checkpoint: checkpoint lists " + std::to_string(idx) +
                             " tensors but the model has " + std::to_string(params.size()));
  }

  int64_t expected_offset = 0;
  for (size_t i = 0; i < params.size(); ++i) {
    if (offsets[i] != expected_offset) {
      throw std::runtime_error("load_checkpoint: unexpected data offset for '" + params[i].name +
                               "'");
    }
    in.read(reinterpret_cast<char*>(params[i].tensor->values.data()),
            static_cast<std::streamsize>(params[i].tensor->values.size() * sizeof(double)));
    if (!in) {
      throw std::runtime_error("load_checkpoint: truncated data for '" + params[i].name + "'");
    }
    expected_offset += params[i].tensor->size();
  }
}

}  // namespace adp
