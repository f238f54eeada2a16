#include <array>
#include <cstring>
#include <fstream>

#include "cvloc/encoders/model.hpp"
#include "cvloc/errors.hpp"

namespace cvloc::encoders {

namespace {

constexpr std::array<char, 8> kMagic = {'C', 'V', 'L', 'O', 'C', 'K', 'P', 'T'};
constexpr std::uint32_t kVersion = 1;

constexpr std::uint32_t tower_code(Tower t) { return t == Tower::text ? 0 : 1; }

template <typename T>
void put(std::ostream& out, T value) {
  out.write(reinterpret_cast<const char*>(&value), sizeof(T));
}

template <typename T>
T get(std::istream& in) {
  T value{};
  in.read(reinterpret_cast<char*>(&value), sizeof(T));
  if (!in) throw FormatError("checkpoint truncated");
  return value;
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const DualEncoder& model) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write checkpoint " + path.string());
  out.write(kMagic.data(), kMagic.size());
  put<std::uint32_t>(out, kVersion);
  put<std::uint32_t>(out, tower_code(model.query.tower()));
  const auto& c = model.config;
  for (std::size_t v : {c.vocab_size, c.d_model, c.n_heads, c.n_layers, c.base_context, c.expanded_context,
                        c.image_size, c.patch_size, c.embed_dim, c.mlp_ratio}) {
    put<std::uint64_t>(out, v);
  }
  const auto params = model.trainable();
  put<std::uint64_t>(out, params.size());
  for (const auto& [name, tensor] : params) {
    put<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    put<std::uint32_t>(out, static_cast<std::uint32_t>(tensor->rank()));
    for (auto dim : tensor->shape()) put<std::uint64_t>(out, dim);
    for (double v : tensor->data()) put<float>(out, static_cast<float>(v));
  }
  if (!out) throw Error("failed writing checkpoint " + path.string());
}

DualEncoder load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot read checkpoint " + path.string());
  std::array<char, 8> magic{};
  in.read(magic.data(), magic.size());
  if (!in || magic != kMagic) throw FormatError(path.string() + " is not a checkpoint");
  const auto version = get<std::uint32_t>(in);
  if (version != kVersion) throw FormatError("unsupported checkpoint version " + std::to_string(version));
  const auto query_code = get<std::uint32_t>(in);
  if (query_code > 1) throw FormatError("unknown query tower code " + std::to_string(query_code));
  const Tower query_tower = query_code == 0 ? Tower::text : Tower::image;

  EncoderConfig c;
  for (std::size_t* field : {&c.vocab_size, &c.d_model, &c.n_heads, &c.n_layers, &c.base_context,
                             &c.expanded_context, &c.image_size, &c.patch_size, &c.embed_dim, &c.mlp_ratio}) {
    *field = static_cast<std::size_t>(get<std::uint64_t>(in));
  }
  c.validate();
  DualEncoder model = DualEncoder::create(c, 0, query_tower);
  auto params = model.trainable();
  const auto count = get<std::uint64_t>(in);
  if (count != params.size()) {
    throw FormatError("checkpoint holds " + std::to_string(count) + " tensors, model expects " +
                      std::to_string(params.size()));
  }
  for (auto& [expected_name, tensor] : params) {
    const auto len = get<std::uint32_t>(in);
    std::string name(len, '\0');
    in.read(name.data(), len);
    if (name != expected_name) throw FormatError("checkpoint tensor " + name + " where " + expected_name + " expected");
    const auto rank = get<std::uint32_t>(in);
    numerics::Shape shape(rank);
    for (auto& dim : shape) dim = static_cast<std::size_t>(get<std::uint64_t>(in));
    if (shape != tensor->shape()) {
      throw FormatError("tensor " + name + " has shape " + numerics::shape_string(shape) + ", expected " +
                        numerics::shape_string(tensor->shape()));
    }
    for (auto& v : tensor->storage()) v = static_cast<double>(get<float>(in));
  }
  return model;
}

}  // namespace cvloc::encoders
