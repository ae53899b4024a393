#include "actfocus/checkpoint.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>

#include <json.hpp>

#include "actfocus/errors.hpp"

namespace actfocus {

namespace {

constexpr std::array<char, 8> kMagic{'A', 'F', 'C', 'K', 'P', 'T', '0', '1'};

template <class T>
void put_le(std::ostream& out, T v) {
  std::array<unsigned char, sizeof(T)> b;
  std::memcpy(b.data(), &v, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(b.begin(), b.end());
  out.write(reinterpret_cast<const char*>(b.data()), sizeof(T));
}

template <class T>
T get_le(std::istream& in) {
  std::array<unsigned char, sizeof(T)> b;
  if (!in.read(reinterpret_cast<char*>(b.data()), sizeof(T))) throw FormatError("checkpoint truncated");
  if constexpr (std::endian::native == std::endian::big) std::reverse(b.begin(), b.end());
  T v;
  std::memcpy(&v, b.data(), sizeof(T));
  return v;
}

std::string_view role_name(ParamRole r) {
  switch (r) {
    case ParamRole::Theta: return "theta";
    case ParamRole::Old: return "old";
    case ParamRole::Reference: return "reference";
  }
  return "theta";
}

ParamRole parse_role(const std::string& s) {
  if (s == "theta") return ParamRole::Theta;
  if (s == "old") return ParamRole::Old;
  if (s == "reference") return ParamRole::Reference;
  throw FormatError("checkpoint: unknown role '" + s + "'");
}

}  // namespace

void write_checkpoint(std::ostream& out, const PolicyParams& params) {
  using nlohmann::json;
  const auto& a = params.arch;
  json header;
  header["arch"] = {{"vocab_size", a.vocab_size}, {"d_model", a.d_model},       {"n_heads", a.n_heads},
                    {"n_layers", a.n_layers},     {"context_window", a.context_window}, {"value_head", a.value_head},
                    {"mlp_mult", a.mlp_mult}};
  header["role"] = role_name(params.role);
  header["param_count"] = params.values.size();
  json manifest = json::array();
  for (const auto& s : params.manifest->slots()) manifest.push_back({{"name", s.name}, {"offset", s.offset}, {"shape", s.shape}});
  header["manifest"] = std::move(manifest);
  const std::string text = header.dump();

  out.write(kMagic.data(), kMagic.size());
  put_le<std::uint32_t>(out, kCheckpointVersion);
  put_le<std::uint64_t>(out, text.size());
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (double v : params.values) put_le<double>(out, v);
  if (!out) throw Error("checkpoint write failed");
}

void save_checkpoint(const std::filesystem::path& path, const PolicyParams& params) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot open '" + path.string() + "' for writing");
  write_checkpoint(out, params);
}

PolicyParams read_checkpoint(std::istream& in) {
  std::array<char, 8> magic{};
  if (!in.read(magic.data(), magic.size()) || magic != kMagic) throw FormatError("checkpoint: bad magic");
  if (get_le<std::uint32_t>(in) != kCheckpointVersion) throw FormatError("checkpoint: unsupported version");
  const auto len = get_le<std::uint64_t>(in);
  if (len > (1u << 26)) throw FormatError("checkpoint: header too large");
  std::string text(len, '\0');
  if (!in.read(text.data(), static_cast<std::streamsize>(len))) throw FormatError("checkpoint truncated");

  PolicyArch arch;
  nlohmann::json header;
  std::size_t count = 0;
  ParamRole role = ParamRole::Theta;
  try {
    header = nlohmann::json::parse(text);
    const auto& a = header.at("arch");
    arch.vocab_size = a.at("vocab_size");
    arch.d_model = a.at("d_model");
    arch.n_heads = a.at("n_heads");
    arch.n_layers = a.at("n_layers");
    arch.context_window = a.at("context_window");
    arch.value_head = a.at("value_head");
    arch.mlp_mult = a.at("mlp_mult");
    count = header.at("param_count");
    role = parse_role(header.at("role"));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("checkpoint header: ") + e.what());
  }
  try {
    arch.validate();
  } catch (const ConfigError& e) {
    throw FormatError(std::string("checkpoint arch: ") + e.what());
  }
  auto params = PolicyParams::zeros(arch);
  params.role = role;
  if (params.values.size() != count) throw FormatError("checkpoint: parameter count does not match the architecture");
  const auto& slots = params.manifest->slots();
  const auto& listed = header.at("manifest");
  if (listed.size() != slots.size()) throw FormatError("checkpoint: manifest mismatch");
  for (std::size_t i = 0; i < slots.size(); ++i)
    if (listed[i].at("name") != slots[i].name || listed[i].at("offset") != slots[i].offset)
      throw FormatError("checkpoint: manifest mismatch at '" + slots[i].name + "'");
  for (double& v : params.values) v = get_le<double>(in);
  return params;
}

PolicyParams load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open checkpoint '" + path.string() + "'");
  return read_checkpoint(in);
}

}  // namespace actfocus
