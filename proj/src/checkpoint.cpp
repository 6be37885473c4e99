#include "hsf/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>

#include "hsf/errors.hpp"

namespace hsf {

static_assert(std::endian::native == std::endian::little,
              "checkpoint blobs are written in host order and must be little-endian");

namespace {

constexpr char kMagic[8] = {'H', 'S', 'F', 'C', 'K', 'P', 'T', '\0'};

std::string dtype_name(torch::Dtype d) {
  switch (d) {
    case torch::kFloat32: return "float32";
    case torch::kFloat64: return "float64";
    case torch::kInt64: return "int64";
    case torch::kUInt8: return "uint8";
    default: throw FormatError("unsupported checkpoint dtype");
  }
}

torch::Dtype dtype_from(const std::string& s) {
  if (s == "float32") return torch::kFloat32;
  if (s == "float64") return torch::kFloat64;
  if (s == "int64") return torch::kInt64;
  if (s == "uint8") return torch::kUInt8;
  throw FormatError("unknown blob dtype " + s);
}

template <typename T>
void put(std::ostream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof v);
}

template <typename T>
T take(std::istream& is, const std::string& what) {
  T v{};
  if (!is.read(reinterpret_cast<char*>(&v), sizeof v)) throw FormatError("truncated checkpoint " + what);
  return v;
}

}  // namespace

void Checkpoint::add(const std::string& name, const torch::Tensor& t) {
  auto c = t.detach().to(torch::kCPU).contiguous().clone();
  if (blobs.contains(name)) blobs[name] = c;
  else blobs.insert(name, c);
}

const torch::Tensor& Checkpoint::blob(const std::string& name) const {
  const auto* t = blobs.find(name);
  if (t == nullptr) throw FormatError("checkpoint has no blob " + name);
  return *t;
}

void Checkpoint::save(const std::filesystem::path& path) const {
  nlohmann::json manifest;
  manifest["meta"] = meta;
  auto entries = nlohmann::json::array();
  std::uint64_t offset = 0;
  for (const auto& item : blobs) {
    const auto& t = item.value();
    const std::uint64_t bytes = t.numel() * t.element_size();
    entries.push_back({{"name", item.key()},
                       {"dtype", dtype_name(t.scalar_type())},
                       {"shape", t.sizes().vec()},
                       {"offset", offset},
                       {"bytes", bytes}});
    offset += bytes;
  }
  manifest["blobs"] = entries;
  const std::string text = manifest.dump();

  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("cannot write " + tmp.string());
    os.write(kMagic, sizeof kMagic);
    put<std::uint32_t>(os, kVersion);
    put<std::uint64_t>(os, text.size());
    os.write(text.data(), static_cast<std::streamsize>(text.size()));
    for (const auto& item : blobs) {
      const auto& t = item.value();
      os.write(static_cast<const char*>(t.data_ptr()), static_cast<std::streamsize>(t.numel() * t.element_size()));
    }
    if (!os) throw IoError("failed writing " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint Checkpoint::load(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw NotFound("no checkpoint at " + path.string());
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path.string());

  char magic[8];
  if (!is.read(magic, sizeof magic) || std::memcmp(magic, kMagic, sizeof kMagic) != 0)
    throw FormatError(path.string() + " is not a checkpoint");
  const auto version = take<std::uint32_t>(is, "header");
  if (version != kVersion)
    throw FormatError(path.string() + ": checkpoint version " + std::to_string(version) +
                      " is not supported (expected " + std::to_string(kVersion) + ")");
  const auto len = take<std::uint64_t>(is, "header");
  std::string text(len, '\0');
  if (!is.read(text.data(), static_cast<std::streamsize>(len))) throw FormatError("truncated checkpoint manifest");

  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path.string() + ": bad manifest: " + e.what());
  }

  Checkpoint ckpt;
  ckpt.meta = manifest.value("meta", nlohmann::json::object());
  const auto payload_start = is.tellg();
  for (const auto& entry : manifest.at("blobs")) {
    const auto dtype = dtype_from(entry.at("dtype").get<std::string>());
    const auto shape = entry.at("shape").get<std::vector<std::int64_t>>();
    const auto offset = entry.at("offset").get<std::uint64_t>();
    const auto bytes = entry.at("bytes").get<std::uint64_t>();
    auto t = torch::empty(shape, torch::TensorOptions().dtype(dtype));
    if (static_cast<std::uint64_t>(t.numel() * t.element_size()) != bytes)
      throw FormatError("blob " + entry.at("name").get<std::string>() + " size disagrees with its shape");
    is.seekg(payload_start + static_cast<std::streamoff>(offset));
    if (!is.read(static_cast<char*>(t.data_ptr()), static_cast<std::streamsize>(bytes)))
      throw FormatError("truncated blob " + entry.at("name").get<std::string>());
    ckpt.blobs.insert(entry.at("name").get<std::string>(), t);
  }
  return ckpt;
}

void store_params(Checkpoint& ckpt, const std::string& prefix, const net::ParamSet& params) {
  for (const auto& item : params) ckpt.add(prefix + "/" + item.key(), item.value());
}

void restore_params(const Checkpoint& ckpt, const std::string& prefix, net::ParamSet& params) {
  torch::NoGradGuard guard;
  for (auto& item : params) {
    const auto& src = ckpt.blob(prefix + "/" + item.key());
    auto& dst = item.value();
    if (src.sizes() != dst.sizes())
      throw FormatError("blob " + prefix + "/" + item.key() + " has shape " +
                        c10::str(src.sizes()) + ", expected " + c10::str(dst.sizes()));
    dst.copy_(src.to(dst.scalar_type()));
  }
}

std::uint64_t fingerprint(const net::ParamSet& params) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  auto mix = [&h](const void* data, std::size_t n) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < n; ++i) {
      h ^= p[i];
      h *= 0x100000001b3ULL;
    }
  };
  for (const auto& item : params) {
    mix(item.key().data(), item.key().size());
    const auto t = item.value().detach().contiguous();
    for (auto s : t.sizes()) mix(&s, sizeof s);
    mix(t.data_ptr(), t.numel() * t.element_size());
  }
  return h;
}

}  // namespace hsf
