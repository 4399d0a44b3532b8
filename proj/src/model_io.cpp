#include "xmed/model_io.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

#include "json.hpp"
#include "xmed/error.hpp"

namespace xmed {
namespace {

using json = nlohmann::ordered_json;

constexpr char kMagic[4] = {'X', 'M', 'E', 'D'};

json conv_json(const ConvSpec& s) {
  return {{"in_channels", s.in_c},
          {"out_channels", s.out_c},
          {"kernel", s.kernel},
          {"stride", s.stride},
          {"padding", s.padding == Padding::same ? "same" : "valid"}};
}

json layer_json(const LayerSpec& layer) {
  json j = {{"name", layer.name}, {"kind", std::string(to_string(layer.kind()))}};
  std::visit(
      [&](const auto& s) {
        using S = std::decay_t<decltype(s)>;
        if constexpr (std::is_same_v<S, ConvSpec>) {
          j.update(conv_json(s));
        } else if constexpr (std::is_same_v<S, BatchNormSpec>) {
          j["channels"] = s.channels;
          j["eps"] = s.eps;
          j["momentum"] = s.momentum;
        } else if constexpr (std::is_same_v<S, MaxPoolSpec>) {
          j["window"] = s.window;
          j["stride"] = s.stride;
        } else if constexpr (std::is_same_v<S, DenseSpec>) {
          j["in_features"] = s.in;
          j["out_features"] = s.out;
        } else if constexpr (std::is_same_v<S, ResidualBlockSpec>) {
          j["in_channels"] = s.in_c;
          j["out_channels"] = s.out_c;
          j["stride"] = s.stride;
        } else if constexpr (std::is_same_v<S, DenseBlockSpec>) {
          j["in_channels"] = s.in_c;
          j["layers"] = s.units.size();
          j["growth_rate"] = s.growth;
        } else if constexpr (std::is_same_v<S, TransitionSpec>) {
          j["in_channels"] = s.in_c;
          j["out_channels"] = s.out_c;
        }
      },
      layer.body);
  return j;
}

// Replays a layer description onto `m`, registering parameters in the same
// order the builders do.
void append_layer(Model& m, const json& j) {
  const std::string name = j.at("name").get<std::string>();
  const std::string kind = j.at("kind").get<std::string>();
  auto size = [&](const char* key) { return j.at(key).get<std::size_t>(); };
  if (kind == "conv") {
    const std::string pad = j.at("padding").get<std::string>();
    if (pad != "same" && pad != "valid") throw ConfigError("unknown padding '" + pad + "'");
    m.append({name, make_conv(m, name, size("in_channels"), size("out_channels"), size("kernel"), size("stride"),
                              pad == "same" ? Padding::same : Padding::valid)});
  } else if (kind == "batchnorm") {
    m.append({name, make_batchnorm(m, name, size("channels"), j.at("eps").get<double>(),
                                   j.at("momentum").get<double>())});
  } else if (kind == "relu") {
    m.append({name, ReluSpec{}});
  } else if (kind == "maxpool") {
    m.append({name, MaxPoolSpec{size("window"), size("stride")}});
  } else if (kind == "gap") {
    m.append({name, GapSpec{}});
  } else if (kind == "flatten") {
    m.append({name, FlattenSpec{}});
  } else if (kind == "dense") {
    m.append({name, make_dense(m, name, size("in_features"), size("out_features"))});
  } else if (kind == "residual_block") {
    m.append({name, make_residual_block(m, name, size("in_channels"), size("out_channels"), size("stride"))});
  } else if (kind == "dense_block") {
    m.append({name, make_dense_block(m, name, size("in_channels"), size("layers"), size("growth_rate"))});
  } else if (kind == "transition") {
    m.append({name, make_transition(m, name, size("in_channels"), size("out_channels"))});
  } else {
    throw ConfigError("unknown layer kind '" + kind + "'");
  }
}

void put_u32(std::vector<std::byte>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::byte>((v >> (8 * i)) & 0xFF));
}

void put_u64(std::vector<std::byte>& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::byte>((v >> (8 * i)) & 0xFF));
}

std::uint64_t get_le(std::span<const std::byte> bytes, std::size_t offset, std::size_t width) {
  std::uint64_t v = 0;
  for (std::size_t i = 0; i < width; ++i) v |= static_cast<std::uint64_t>(bytes[offset + i]) << (8 * i);
  return v;
}

}  // namespace

std::string describe_model(const Model& model) {
  json j;
  j["format"] = "xmed-model";
  j["architecture"] = model.architecture;
  j["input_shape"] = {model.input_shape().c, model.input_shape().h, model.input_shape().w};
  j["num_classes"] = model.num_classes();
  j["class_names"] = model.class_names;
  j["positive_class"] = model.positive_class;
  j["capture_layer"] = model.capture_layer();
  json layers = json::array();
  for (const auto& l : model.layers()) layers.push_back(layer_json(l));
  j["layers"] = std::move(layers);
  json tensors = json::array();
  for (const auto& p : model.params()) {
    const Shape4& s = p.value.shape();
    tensors.push_back({{"name", p.name}, {"shape", {s.n, s.c, s.h, s.w}}});
  }
  j["tensors"] = std::move(tensors);
  return j.dump();
}

std::vector<std::byte> serialize_model(const Model& model) {
  const std::string text = describe_model(model);
  std::vector<std::byte> out;
  out.reserve(kModelHeaderSize + text.size() + 4 * model.stored_value_count());
  for (char c : kMagic) out.push_back(static_cast<std::byte>(c));
  put_u32(out, kModelFormatVersion);
  put_u64(out, text.size());
  for (char c : text) out.push_back(static_cast<std::byte>(c));
  for (const auto& p : model.params()) {
    for (float v : p.value.values()) put_u32(out, std::bit_cast<std::uint32_t>(v));
  }
  return out;
}

Model deserialize_model(std::span<const std::byte> bytes) {
  if (bytes.size() < kModelHeaderSize) throw FormatError("truncated header", bytes.size());
  if (std::memcmp(bytes.data(), kMagic, 4) != 0) throw FormatError("bad magic, not an XMED model file", 0);
  const auto version = static_cast<std::uint32_t>(get_le(bytes, 4, 4));
  if (version != kModelFormatVersion) {
    throw FormatError("unsupported format version " + std::to_string(version), 4);
  }
  const std::uint64_t length = get_le(bytes, 8, 8);
  if (length > bytes.size() - kModelHeaderSize) {
    throw FormatError("description length " + std::to_string(length) + " exceeds file size", 8);
  }

  json j;
  const auto* text = reinterpret_cast<const char*>(bytes.data() + kModelHeaderSize);
  try {
    j = json::parse(text, text + length);
  } catch (const json::parse_error& e) {
    // parse_error::byte is 1-based.
    throw FormatError(std::string("malformed model description: ") + e.what(),
                      kModelHeaderSize + (e.byte > 0 ? e.byte - 1 : 0));
  }

  std::size_t offset = kModelHeaderSize + static_cast<std::size_t>(length);
  try {
    const auto shape = j.at("input_shape").get<std::vector<std::size_t>>();
    if (shape.size() != 3) throw ConfigError("input_shape must have 3 entries");
    Model m({shape[0], shape[1], shape[2]}, j.at("num_classes").get<std::size_t>());
    m.architecture = j.value("architecture", "");
    m.class_names = j.value("class_names", std::vector<std::string>{});
    m.positive_class = j.value("positive_class", std::size_t{1});
    for (const auto& layer : j.at("layers")) append_layer(m, layer);
    m.set_capture_layer(j.at("capture_layer").get<std::string>());
    if (m.layers().empty()) throw ConfigError("model has no layers");
    const Shape4& head = m.layer_output_shape(m.layers().back().name);
    if (head.c != m.num_classes() || head.h != 1 || head.w != 1) {
      throw ConfigError("final layer yields " + head.str() + ", expected " + std::to_string(m.num_classes()) +
                        " logits");
    }

    const json& tensors = j.at("tensors");
    auto& params = m.mutable_params();
    if (tensors.size() != params.size()) {
      throw ConfigError("description lists " + std::to_string(tensors.size()) + " tensors, architecture has " +
                        std::to_string(params.size()));
    }
    for (std::size_t i = 0; i < params.size(); ++i) {
      const auto dims = tensors[i].at("shape").get<std::vector<std::size_t>>();
      const Shape4& s = params[i].value.shape();
      if (tensors[i].at("name").get<std::string>() != params[i].name || dims.size() != 4 || dims[0] != s.n ||
          dims[1] != s.c || dims[2] != s.h || dims[3] != s.w) {
        throw ConfigError("tensor " + std::to_string(i) + " does not match architecture (" + params[i].name + " " +
                          s.str() + ")");
      }
    }
    for (auto& p : params) {
      const std::size_t need = 4 * p.value.size();
      if (bytes.size() - offset < need) throw FormatError("truncated tensor data for " + p.name, bytes.size());
      for (auto& v : p.value.values()) {
        v = std::bit_cast<float>(static_cast<std::uint32_t>(get_le(bytes, offset, 4)));
        offset += 4;
      }
    }
    if (offset != bytes.size()) throw FormatError("trailing bytes after tensor data", offset);
    return m;
  } catch (const FormatError&) {
    throw;
  } catch (const std::exception& e) {
    throw FormatError(std::string("invalid model description: ") + e.what(), kModelHeaderSize);
  }
}

void save_model(const Model& model, const std::filesystem::path& path) {
  const std::vector<std::byte> bytes = serialize_model(model);
  // Write-then-rename so an interrupted checkpoint never leaves a torn file.
  std::filesystem::path tmp = path;
  tmp += ".partial";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open " + tmp.string() + " for writing");
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("failed writing " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError("cannot move " + tmp.string() + " to " + path.string() + ": " + ec.message());
}

Model load_model(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::vector<char> raw((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return deserialize_model(std::as_bytes(std::span<const char>(raw)));
}

}  // namespace xmed
