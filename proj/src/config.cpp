#include "hsf/config.hpp"

#include <array>
#include <charconv>
#include <cstdio>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>

namespace hsf {

std::string to_string(Preset p) { return p == Preset::Paper ? "paper" : "toy"; }

Preset parse_preset(const std::string& s) {
  if (s == "paper") return Preset::Paper;
  if (s == "toy") return Preset::Toy;
  throw ConfigError("unknown preset '" + s + "' (expected paper or toy)");
}

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

std::int64_t parse_int(const std::string& key, const std::string& v) {
  std::int64_t out = 0;
  auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size())
    throw ConfigError("config key '" + key + "': expected an integer, got '" + v + "'");
  return out;
}

std::uint64_t parse_uint(const std::string& key, const std::string& v) {
  std::uint64_t out = 0;
  auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size())
    throw ConfigError("config key '" + key + "': expected a non-negative integer, got '" + v + "'");
  return out;
}

double parse_double(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    const double out = std::stod(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return out;
  } catch (const std::exception&) {
    throw ConfigError("config key '" + key + "': expected a number, got '" + v + "'");
  }
}

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
  if (v == "false" || v == "0" || v == "no" || v == "off") return false;
  throw ConfigError("config key '" + key + "': expected true/false, got '" + v + "'");
}

std::string fmt_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

struct Field {
  std::function<void(RunConfig&, const std::string&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

template <typename T>
Field field(T RunConfig::*member) {
  Field f;
  f.set = [member](RunConfig& c, const std::string& key, const std::string& v) {
    if constexpr (std::is_same_v<T, bool>) c.*member = parse_bool(key, v);
    else if constexpr (std::is_same_v<T, std::int64_t>) c.*member = parse_int(key, v);
    else if constexpr (std::is_same_v<T, std::uint64_t>) c.*member = parse_uint(key, v);
    else if constexpr (std::is_same_v<T, double>) c.*member = parse_double(key, v);
    else if constexpr (std::is_same_v<T, std::filesystem::path>) c.*member = v;
    else if constexpr (std::is_same_v<T, Preset>) c.*member = parse_preset(v);
  };
  f.get = [member](const RunConfig& c) -> std::string {
    if constexpr (std::is_same_v<T, bool>) return c.*member ? "true" : "false";
    else if constexpr (std::is_same_v<T, std::int64_t> || std::is_same_v<T, std::uint64_t>)
      return std::to_string(c.*member);
    else if constexpr (std::is_same_v<T, double>) return fmt_double(c.*member);
    else if constexpr (std::is_same_v<T, std::filesystem::path>) return (c.*member).string();
    else if constexpr (std::is_same_v<T, Preset>) return to_string(c.*member);
  };
  return f;
}

const std::vector<std::pair<std::string, Field>>& fields() {
  static const std::vector<std::pair<std::string, Field>> table = {
      {"preset", field(&RunConfig::preset)},
      {"data_root", field(&RunConfig::data_root)},
      {"out_dir", field(&RunConfig::out_dir)},
      {"height", field(&RunConfig::height)},
      {"width", field(&RunConfig::width)},
      {"crop", field(&RunConfig::crop)},
      {"hflip", field(&RunConfig::hflip)},
      {"base_ch", field(&RunConfig::base_ch)},
      {"unet_depth", field(&RunConfig::unet_depth)},
      {"resnet_blocks", field(&RunConfig::resnet_blocks)},
      {"dy_layers", field(&RunConfig::dy_layers)},
      {"frb_reduction", field(&RunConfig::frb_reduction)},
      {"lambda_sere", field(&RunConfig::lambda_sere)},
      {"cycle_weight", field(&RunConfig::cycle_weight)},
      {"reverse_cycle", field(&RunConfig::reverse_cycle)},
      {"ohem_threshold", field(&RunConfig::ohem_threshold)},
      {"mu", field(&RunConfig::mu)},
      {"rho", field(&RunConfig::rho)},
      {"eta", field(&RunConfig::eta)},
      {"omega0", field(&RunConfig::omega0)},
      {"gamma0", field(&RunConfig::gamma0)},
      {"lr", field(&RunConfig::lr)},
      {"beta1", field(&RunConfig::beta1)},
      {"beta2", field(&RunConfig::beta2)},
      {"lr_decay", field(&RunConfig::lr_decay)},
      {"epochs_cgfe", field(&RunConfig::epochs_cgfe)},
      {"epochs_fusion", field(&RunConfig::epochs_fusion)},
      {"batch_size", field(&RunConfig::batch_size)},
      {"checkpoint_every", field(&RunConfig::checkpoint_every)},
      {"seed", field(&RunConfig::seed)},
      {"n_train", field(&RunConfig::n_train)},
      {"n_test", field(&RunConfig::n_test)},
  };
  return table;
}

const Field& lookup(const std::string& key) {
  for (const auto& [name, f] : fields())
    if (name == key) return f;
  throw ConfigError("unknown config key '" + key + "'");
}

}  // namespace

RunConfig RunConfig::defaults(Preset preset) {
  RunConfig c;
  c.preset = preset;
  if (preset == Preset::Paper) {
    // FMB frames are 800x600; a centre crop keeps sizes divisible by 2^7.
    c.height = 512;
    c.width = 768;
    c.crop = true;
    c.base_ch = 64;
    c.unet_depth = 7;
    c.frb_reduction = 64;
    c.epochs_cgfe = 400;
    c.epochs_fusion = 400;
    c.batch_size = 4;
  }
  return c;
}

void RunConfig::set(const std::string& key, const std::string& value) {
  lookup(key).set(*this, key, trim(value));
}

std::string RunConfig::get(const std::string& key) const { return lookup(key).get(*this); }

const std::vector<std::string>& RunConfig::keys() {
  static const std::vector<std::string> names = [] {
    std::vector<std::string> out;
    for (const auto& [name, f] : fields()) out.push_back(name);
    return out;
  }();
  return names;
}

std::int64_t RunConfig::size_multiple() const {
  return std::max<std::int64_t>(std::int64_t{1} << unet_depth, 4);
}

void RunConfig::validate() const {
  auto positive = [](const char* name, double v) {
    if (!(v > 0)) throw ConfigError(std::string(name) + " must be positive");
  };
  auto non_negative = [](const char* name, double v) {
    if (!(v >= 0)) throw ConfigError(std::string(name) + " must be non-negative");
  };
  positive("height", static_cast<double>(height));
  positive("width", static_cast<double>(width));
  positive("base_ch", static_cast<double>(base_ch));
  positive("unet_depth", static_cast<double>(unet_depth));
  positive("resnet_blocks", static_cast<double>(resnet_blocks));
  positive("dy_layers", static_cast<double>(dy_layers));
  positive("frb_reduction", static_cast<double>(frb_reduction));
  non_negative("lambda_sere", lambda_sere);
  non_negative("cycle_weight", cycle_weight);
  non_negative("mu", mu);
  non_negative("rho", rho);
  non_negative("eta", eta);
  positive("lr", lr);
  positive("batch_size", static_cast<double>(batch_size));
  non_negative("epochs_cgfe", static_cast<double>(epochs_cgfe));
  non_negative("epochs_fusion", static_cast<double>(epochs_fusion));
  non_negative("checkpoint_every", static_cast<double>(checkpoint_every));
  non_negative("n_train", static_cast<double>(n_train));
  non_negative("n_test", static_cast<double>(n_test));
  if (!(ohem_threshold > 0 && ohem_threshold <= 1)) throw ConfigError("ohem_threshold must be in (0,1]");
  if (!(beta1 >= 0 && beta1 < 1 && beta2 >= 0 && beta2 < 1)) throw ConfigError("Adam betas must be in [0,1)");
  if (unet_depth > 12) throw ConfigError("unet_depth is unreasonably large");
  const auto m = size_multiple();
  if (height % m != 0 || width % m != 0)
    throw ConfigError("image size " + std::to_string(height) + "x" + std::to_string(width) +
                      " is not a multiple of " + std::to_string(m) + " required by unet_depth " +
                      std::to_string(unet_depth));
  const auto taps = fusion::tap_channels(base_ch);
  if (taps % frb_reduction != 0)
    throw ConfigError("reconstruction features (" + std::to_string(taps) +
                      " channels) are not divisible by frb_reduction " + std::to_string(frb_reduction));
}

std::string RunConfig::to_text() const {
  std::ostringstream os;
  for (const auto& [name, f] : fields()) os << name << " = " << f.get(*this) << "\n";
  return os.str();
}

cgfe::CgfeConfig RunConfig::cgfe_config() const {
  cgfe::CgfeConfig c;
  c.base_ch = base_ch;
  c.unet_depth = unet_depth;
  c.resnet_blocks = resnet_blocks;
  c.dy_layers = dy_layers;
  c.lambda_sere = lambda_sere;
  c.cycle_weight = cycle_weight;
  c.reverse_cycle = reverse_cycle;
  c.ohem_threshold = ohem_threshold;
  c.adam = {lr, beta1, beta2};
  return c;
}

fusion::FusionConfig RunConfig::fusion_config() const {
  fusion::FusionConfig c;
  c.reduction = frb_reduction;
  c.mu = mu;
  c.rho = rho;
  c.eta = eta;
  c.omega0 = omega0;
  c.gamma0 = gamma0;
  c.adam = {lr, beta1, beta2};
  return c;
}

Overrides parse_config_text(const std::string& text) {
  Overrides out;
  std::istringstream is(text);
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError("config line " + std::to_string(lineno) + ": expected key = value");
    auto key = trim(line.substr(0, eq));
    auto value = trim(line.substr(eq + 1));
    if (key.empty()) throw ConfigError("config line " + std::to_string(lineno) + ": empty key");
    lookup(key);  // reject typos early, with the line number in the log
    out.emplace_back(std::move(key), std::move(value));
  }
  return out;
}

RunConfig load_config(const std::optional<std::filesystem::path>& file, const Overrides& overrides,
                      const std::optional<Preset>& preset_flag) {
  Overrides from_file;
  if (file) {
    std::ifstream in(*file);
    if (!in) throw NotFound("cannot read config file " + file->string());
    std::stringstream ss;
    ss << in.rdbuf();
    from_file = parse_config_text(ss.str());
  }
  Preset preset = Preset::Toy;
  for (const Overrides* list : std::array<const Overrides*, 2>{&from_file, &overrides})
    for (const auto& [k, v] : *list)
      if (k == "preset") preset = parse_preset(trim(v));
  if (preset_flag) preset = *preset_flag;

  RunConfig cfg = RunConfig::defaults(preset);
  for (const Overrides* list : std::array<const Overrides*, 2>{&from_file, &overrides})
    for (const auto& [k, v] : *list)
      if (k != "preset") cfg.set(k, v);
  cfg.validate();
  return cfg;
}

}  // namespace hsf
