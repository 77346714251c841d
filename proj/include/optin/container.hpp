#pragma once

// Model/batch container:
//
//   offset 0   "OPTN"                       4 bytes magic
//   offset 4   format version               u32 little-endian
//   offset 8   header length L              u64 little-endian
//   offset 16  UTF-8 JSON header            L bytes, space padded so that
//                                           16 + L is a multiple of 64
//   offset 16+L  payload                    raw little-endian tensor bytes
//
// Header: {"arch": "transformer"|"cnn"|"batch", "dims": {...},
//          "tensors": [{"name", "dtype": "f32"|"i32", "shape", "byte_offset"}]}
// byte_offset is relative to the payload start and a multiple of 64.

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <map>
#include <string>
#include <variant>
#include <vector>

#include "json.hpp"
#include "optin/cnn.hpp"
#include "optin/model.hpp"

namespace optin {

static_assert(std::endian::native == std::endian::little,
              "container I/O assumes a little-endian host");

inline constexpr char kMagic[4] = {'O', 'P', 'T', 'N'};
inline constexpr std::uint32_t kFormatVersion = 1;
inline constexpr std::size_t kAlign = 64;

enum class DType { f32, i32 };

struct RawTensor {
  std::string name;
  DType dtype = DType::f32;
  Shape shape;
  std::vector<float> f32;
  std::vector<std::int32_t> i32;

  static RawTensor from(std::string name, const Tensor& t) {
    return {std::move(name), DType::f32, t.shape(), {t.data().begin(), t.data().end()}, {}};
  }
  static RawTensor from_i32(std::string name, Shape shape, std::vector<std::int32_t> v) {
    return {std::move(name), DType::i32, std::move(shape), {}, std::move(v)};
  }
  std::size_t bytes() const { return shape_numel(shape) * 4; }
};

struct Container {
  std::string arch;
  nlohmann::json dims = nlohmann::json::object();
  std::vector<RawTensor> tensors;

  const RawTensor* find(const std::string& name) const {
    for (const auto& t : tensors)
      if (t.name == name) return &t;
    return nullptr;
  }

  const RawTensor& get(const std::string& name, DType dtype) const {
    const RawTensor* t = find(name);
    require(t != nullptr, ErrorCode::missing_tensor, "container lacks tensor '" + name + "'");
    require(t->dtype == dtype, ErrorCode::malformed_header,
            "tensor '" + name + "' has the wrong dtype");
    return *t;
  }

  Tensor tensor(const std::string& name) const {
    const RawTensor& t = get(name, DType::f32);
    return Tensor(t.shape, {t.f32.begin(), t.f32.end()});
  }
};

namespace detail {

inline std::size_t align_up(std::size_t v) { return (v + kAlign - 1) / kAlign * kAlign; }

template <class T>
void put_le(std::string& out, T v) {
  char buf[sizeof(T)];
  std::memcpy(buf, &v, sizeof(T));
  out.append(buf, sizeof(T));
}

}  // namespace detail

inline std::string serialize_container(const Container& c) {
  nlohmann::json header;
  header["arch"] = c.arch;
  header["dims"] = c.dims;
  header["tensors"] = nlohmann::json::array();
  std::size_t offset = 0;
  std::vector<std::size_t> offsets;
  for (const auto& t : c.tensors) {
    offsets.push_back(offset);
    header["tensors"].push_back({{"name", t.name},
                                 {"dtype", t.dtype == DType::f32 ? "f32" : "i32"},
                                 {"shape", t.shape},
                                 {"byte_offset", offset}});
    offset = detail::align_up(offset + t.bytes());
  }
  std::string json = header.dump();
  json.append(detail::align_up(16 + json.size()) - 16 - json.size(), ' ');

  std::string out(kMagic, 4);
  detail::put_le<std::uint32_t>(out, kFormatVersion);
  detail::put_le<std::uint64_t>(out, json.size());
  out += json;
  const std::size_t payload_start = out.size();
  out.resize(payload_start + offset, '\0');
  for (std::size_t k = 0; k < c.tensors.size(); ++k) {
    const auto& t = c.tensors[k];
    require(shape_numel(t.shape) == (t.dtype == DType::f32 ? t.f32.size() : t.i32.size()),
            ErrorCode::shape_mismatch, "tensor '" + t.name + "' data does not match its shape");
    const void* src = t.dtype == DType::f32 ? static_cast<const void*>(t.f32.data())
                                            : static_cast<const void*>(t.i32.data());
    std::memcpy(out.data() + payload_start + offsets[k], src, t.bytes());
  }
  return out;
}

inline Container parse_container(const std::string& bytes) {
  require(bytes.size() >= 16, ErrorCode::bad_magic, "file too short for a container");
  require(std::memcmp(bytes.data(), kMagic, 4) == 0, ErrorCode::bad_magic, "bad magic");
  std::uint32_t version;
  std::uint64_t header_len;
  std::memcpy(&version, bytes.data() + 4, 4);
  std::memcpy(&header_len, bytes.data() + 8, 8);
  require(version == kFormatVersion, ErrorCode::version_mismatch,
          "unsupported container version " + std::to_string(version));
  require(header_len <= bytes.size() - 16, ErrorCode::payload_out_of_bounds,
          "header extends past end of file");

  nlohmann::json header;
  try {
    header = nlohmann::json::parse(bytes.begin() + 16, bytes.begin() + 16 + header_len);
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::malformed_header, std::string("container header: ") + e.what());
  }
  const std::size_t payload_start = 16 + header_len;
  const std::size_t payload_size = bytes.size() - payload_start;

  Container c;
  struct Span {
    std::size_t begin, end;
    std::string name;
  };
  std::vector<Span> spans;
  try {
    c.arch = header.at("arch").get<std::string>();
    c.dims = header.value("dims", nlohmann::json::object());
    for (const auto& jt : header.at("tensors")) {
      RawTensor t;
      t.name = jt.at("name").get<std::string>();
      const auto dtype = jt.at("dtype").get<std::string>();
      require(dtype == "f32" || dtype == "i32", ErrorCode::malformed_header,
              "tensor '" + t.name + "' has unsupported dtype " + dtype);
      t.dtype = dtype == "f32" ? DType::f32 : DType::i32;
      t.shape = jt.at("shape").get<Shape>();
      require(!t.shape.empty() && t.shape.size() <= 4 &&
                  std::all_of(t.shape.begin(), t.shape.end(), [](std::size_t e) { return e > 0; }),
              ErrorCode::malformed_header, "tensor '" + t.name + "' has an invalid shape");
      const auto off = jt.at("byte_offset").get<std::uint64_t>();
      require(off % kAlign == 0, ErrorCode::misaligned_tensor,
              "tensor '" + t.name + "' is not 64-byte aligned");
      require(off <= payload_size && t.bytes() <= payload_size - off,
              ErrorCode::payload_out_of_bounds, "tensor '" + t.name + "' payload out of bounds");
      const char* src = bytes.data() + payload_start + off;
      const std::size_t n = shape_numel(t.shape);
      if (t.dtype == DType::f32) {
        t.f32.resize(n);
        std::memcpy(t.f32.data(), src, n * 4);
        require(std::all_of(t.f32.begin(), t.f32.end(), [](float v) { return std::isfinite(v); }),
                ErrorCode::non_finite, "tensor '" + t.name + "' holds NaN or Inf");
      } else {
        t.i32.resize(n);
        std::memcpy(t.i32.data(), src, n * 4);
      }
      require(c.find(t.name) == nullptr, ErrorCode::malformed_header,
              "duplicate tensor name '" + t.name + "'");
      spans.push_back({off, off + t.bytes(), t.name});
      c.tensors.push_back(std::move(t));
    }
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::malformed_header, std::string("container header: ") + e.what());
  }
  std::sort(spans.begin(), spans.end(),
            [](const Span& a, const Span& b) { return a.begin < b.begin; });
  for (std::size_t k = 1; k < spans.size(); ++k)
    require(spans[k].begin >= spans[k - 1].end, ErrorCode::tensor_overlap,
            "tensors '" + spans[k - 1].name + "' and '" + spans[k].name + "' overlap");
  return c;
}

inline void write_file(const std::string& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  require(static_cast<bool>(out), ErrorCode::io_failure, "cannot open '" + path + "' for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  require(static_cast<bool>(out), ErrorCode::io_failure, "failed writing '" + path + "'");
}

inline std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  require(static_cast<bool>(in), ErrorCode::io_failure, "cannot open '" + path + "'");
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void save_container(const std::string& path, const Container& c) {
  write_file(path, serialize_container(c));
}

inline Container load_raw_container(const std::string& path) {
  return parse_container(read_file(path));
}

// ---------------------------------------------------------------------------
// Typed views

inline Container to_container(const ModelGraph& m) {
  m.validate();
  Container c;
  c.arch = "transformer";
  std::vector<std::size_t> ffn;
  for (std::size_t i = 0; i < m.n_blocks(); ++i) ffn.push_back(m.ffn_dim(i));
  c.dims = {{"n_blocks", m.n_blocks()}, {"d_model", m.d_model},    {"n_heads", m.n_heads},
            {"ffn_dims", ffn},          {"n_classes", m.n_classes}, {"pooling", to_string(m.pooling)}};
  if (m.token_schedule) c.dims["token_schedule"] = *m.token_schedule;
  for (std::size_t i = 0; i < m.n_blocks(); ++i) {
    const auto& b = m.blocks[i];
    const std::string p = "blocks." + std::to_string(i) + ".";
    c.tensors.push_back(RawTensor::from(p + "ln1.gamma", b.ln1_gamma));
    c.tensors.push_back(RawTensor::from(p + "ln1.beta", b.ln1_beta));
    c.tensors.push_back(RawTensor::from(p + "attn.wq", b.wq));
    c.tensors.push_back(RawTensor::from(p + "attn.wk", b.wk));
    c.tensors.push_back(RawTensor::from(p + "attn.wv", b.wv));
    c.tensors.push_back(RawTensor::from(p + "attn.wo", b.wo));
    c.tensors.push_back(RawTensor::from(p + "ln2.gamma", b.ln2_gamma));
    c.tensors.push_back(RawTensor::from(p + "ln2.beta", b.ln2_beta));
    c.tensors.push_back(RawTensor::from(p + "ffn.w1", b.w1));
    c.tensors.push_back(RawTensor::from(p + "ffn.w2", b.w2));
  }
  c.tensors.push_back(RawTensor::from("classifier", m.classifier));
  if (m.embedding) c.tensors.push_back(RawTensor::from("embedding", *m.embedding));
  if (m.positional) c.tensors.push_back(RawTensor::from("positional", *m.positional));
  return c;
}

inline ModelGraph model_from_container(const Container& c) {
  require(c.arch == "transformer", ErrorCode::wrong_architecture,
          "expected a transformer container, got '" + c.arch + "'");
  ModelGraph m;
  std::size_t n_blocks = 0;
  std::vector<std::size_t> ffn;
  try {
    n_blocks = c.dims.at("n_blocks").get<std::size_t>();
    m.d_model = c.dims.at("d_model").get<std::size_t>();
    m.n_heads = c.dims.at("n_heads").get<std::size_t>();
    m.n_classes = c.dims.at("n_classes").get<std::size_t>();
    ffn = c.dims.at("ffn_dims").get<std::vector<std::size_t>>();
    m.pooling = parse_pooling(c.dims.value("pooling", std::string("first_token")));
    if (c.dims.contains("token_schedule"))
      m.token_schedule = c.dims.at("token_schedule").get<std::vector<std::size_t>>();
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::malformed_header, std::string("transformer dims: ") + e.what());
  }
  require(ffn.size() == n_blocks, ErrorCode::shape_mismatch, "ffn_dims length != n_blocks");
  for (std::size_t i = 0; i < n_blocks; ++i) {
    const std::string p = "blocks." + std::to_string(i) + ".";
    BlockWeights b{c.tensor(p + "ln1.gamma"), c.tensor(p + "ln1.beta"), c.tensor(p + "attn.wq"),
                   c.tensor(p + "attn.wk"),   c.tensor(p + "attn.wv"),  c.tensor(p + "attn.wo"),
                   c.tensor(p + "ln2.gamma"), c.tensor(p + "ln2.beta"), c.tensor(p + "ffn.w1"),
                   c.tensor(p + "ffn.w2")};
    require(b.w1.rank() == 2 && b.w1.dim(1) == ffn[i], ErrorCode::shape_mismatch,
            "block " + std::to_string(i) + " w1 disagrees with ffn_dims");
    m.blocks.push_back(std::move(b));
  }
  m.classifier = c.tensor("classifier");
  if (c.find("embedding")) m.embedding = c.tensor("embedding");
  if (c.find("positional")) m.positional = c.tensor("positional");
  m.validate();
  return m;
}

inline Container to_container(const CnnGraph& g) {
  g.validate();
  Container c;
  c.arch = "cnn";
  nlohmann::json channels = nlohmann::json::array(), kernels = nlohmann::json::array(),
                 strides = nlohmann::json::array(), pads = nlohmann::json::array(),
                 pools = nlohmann::json::array();
  for (const auto& l : g.layers) {
    channels.push_back(l.out_channels());
    kernels.push_back(l.kernel());
    strides.push_back(l.stride);
    pads.push_back(l.pad);
    pools.push_back(to_string(l.pool));
  }
  c.dims = {{"n_layers", g.n_layers()}, {"in_channels", g.in_channels()},
            {"channels", channels},     {"kernels", kernels},
            {"strides", strides},       {"pads", pads},
            {"pools", pools},           {"n_classes", g.n_classes()}};
  for (std::size_t i = 0; i < g.n_layers(); ++i) {
    const std::string p = "conv." + std::to_string(i) + ".";
    c.tensors.push_back(RawTensor::from(p + "filters", g.layers[i].filters));
    c.tensors.push_back(RawTensor::from(p + "scale", g.layers[i].scale));
    c.tensors.push_back(RawTensor::from(p + "shift", g.layers[i].shift));
  }
  c.tensors.push_back(RawTensor::from("classifier", g.classifier));
  return c;
}

inline CnnGraph cnn_from_container(const Container& c) {
  require(c.arch == "cnn", ErrorCode::wrong_architecture,
          "expected a cnn container, got '" + c.arch + "'");
  CnnGraph g;
  try {
    const auto n = c.dims.at("n_layers").get<std::size_t>();
    const auto strides = c.dims.at("strides").get<std::vector<std::size_t>>();
    const auto pads = c.dims.at("pads").get<std::vector<std::size_t>>();
    const auto pools = c.dims.at("pools").get<std::vector<std::string>>();
    const auto channels = c.dims.at("channels").get<std::vector<std::size_t>>();
    require(strides.size() == n && pads.size() == n && pools.size() == n && channels.size() == n,
            ErrorCode::shape_mismatch, "cnn dims lists must have n_layers entries");
    for (std::size_t i = 0; i < n; ++i) {
      const std::string p = "conv." + std::to_string(i) + ".";
      ConvLayer l{c.tensor(p + "filters"), c.tensor(p + "scale"), c.tensor(p + "shift"),
                  strides[i], pads[i], parse_pool_kind(pools[i])};
      require(l.filters.rank() == 4 && l.out_channels() == channels[i], ErrorCode::shape_mismatch,
              "conv " + std::to_string(i) + " filters disagree with dims");
      g.layers.push_back(std::move(l));
    }
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::malformed_header, std::string("cnn dims: ") + e.what());
  }
  g.classifier = c.tensor("classifier");
  g.validate();
  return g;
}

inline Container to_container(const CalibrationBatch& b) {
  Container c;
  c.arch = "batch";
  c.dims = {{"batch_size", b.batch_size()}};
  if (b.has_tokens())
    c.tensors.push_back(RawTensor::from_i32("tokens", b.token_shape, b.tokens));
  else
    c.tensors.push_back(RawTensor::from("features", b.features));
  if (!b.labels.empty())
    c.tensors.push_back(RawTensor::from_i32("labels", {b.labels.size()}, b.labels));
  return c;
}

inline CalibrationBatch batch_from_container(const Container& c) {
  require(c.arch == "batch", ErrorCode::wrong_architecture,
          "expected a batch container, got '" + c.arch + "'");
  CalibrationBatch b;
  if (const RawTensor* t = c.find("tokens")) {
    require(t->dtype == DType::i32 && t->shape.size() == 2, ErrorCode::shape_mismatch,
            "tokens must be i32 [B,T]");
    b = CalibrationBatch::from_tokens(t->i32, t->shape[0], t->shape[1]);
  } else {
    b = CalibrationBatch::from_features(c.tensor("features"));
  }
  if (const RawTensor* l = c.find("labels")) {
    require(l->dtype == DType::i32 && l->shape == Shape{b.batch_size()}, ErrorCode::shape_mismatch,
            "labels must be i32 [B]");
    b.labels = l->i32;
  }
  return b;
}

using AnyModel = std::variant<ModelGraph, CnnGraph>;

/// Loads and validates a transformer or CNN container.
inline AnyModel load_container(const std::string& path) {
  const Container c = load_raw_container(path);
  if (c.arch == "transformer") return model_from_container(c);
  if (c.arch == "cnn") return cnn_from_container(c);
  fail(ErrorCode::wrong_architecture, "'" + path + "' holds arch '" + c.arch + "', not a model");
}

inline CalibrationBatch load_batch(const std::string& path) {
  return batch_from_container(load_raw_container(path));
}

}  // namespace optin
