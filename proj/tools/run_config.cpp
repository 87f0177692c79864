#include "run_config.hpp"

#include <cctype>
#include <cstdlib>
#include <fstream>

#include "edm/hash.hpp"

namespace edm::cli {

namespace {

std::string trim(std::string_view s) {
  std::size_t a = 0, b = s.size();
  while (a < b && std::isspace(static_cast<unsigned char>(s[a]))) ++a;
  while (b > a && std::isspace(static_cast<unsigned char>(s[b - 1]))) --b;
  return std::string(s.substr(a, b - a));
}

std::string long_name(const CLI::Option& opt) {
  const auto& names = opt.get_lnames();
  return names.empty() ? std::string() : names.front();
}

bool skip_option(const std::string& name) { return name.empty() || name == "help" || name == "config"; }

}  // namespace

std::optional<std::string> ConfigFile::lookup(const std::string& section, const std::string& key) const {
  for (const std::string& s : {section, std::string()}) {
    const auto it = sections.find(s);
    if (it == sections.end()) continue;
    const auto kv = it->second.find(key);
    if (kv != it->second.end()) return kv->second;
  }
  return std::nullopt;
}

ConfigFile parse_config(std::istream& in, std::string_view source) {
  ConfigFile cfg;
  std::string section;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const std::string t = trim(line);
    if (t.empty() || t[0] == '#' || t[0] == ';') continue;
    const std::string where = std::string(source) + ":" + std::to_string(lineno);
    if (t.front() == '[') {
      if (t.back() != ']') throw UserError(where + ": unterminated section header");
      section = trim(std::string_view(t).substr(1, t.size() - 2));
      if (section.empty()) throw UserError(where + ": empty section name");
      continue;
    }
    const auto eq = t.find('=');
    if (eq == std::string::npos) throw UserError(where + ": expected 'key = value'");
    std::string key = trim(std::string_view(t).substr(0, eq));
    std::string value = trim(std::string_view(t).substr(eq + 1));
    if (key.empty()) throw UserError(where + ": empty key");
    for (char& c : key) {
      if (c == '_') c = '-';
    }
    if (value.size() >= 2 && value.front() == '"' && value.back() == '"') value = value.substr(1, value.size() - 2);
    cfg.sections[section][key] = value;
  }
  return cfg;
}

ConfigFile read_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw UserError("cannot open config file " + path.string());
  return parse_config(in, path.string());
}

std::string env_name(std::string_view option) {
  std::string s = "EDM_";
  for (char c : option) s += c == '-' ? '_' : static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
  return s;
}

EnvLookup process_env() {
  return [](const std::string& name) -> std::optional<std::string> {
    if (const char* v = std::getenv(name.c_str())) return std::string(v);
    return std::nullopt;
  };
}

void apply_overlays(CLI::App& sub, const ConfigFile* file, const EnvLookup& env) {
  for (CLI::Option* opt : sub.get_options()) {
    const std::string name = long_name(*opt);
    if (skip_option(name) || opt->count() > 0) continue;
    std::optional<std::string> value = env ? env(env_name(name)) : std::nullopt;
    if (!value && file) value = file->lookup(sub.get_name(), name);
    if (!value) continue;
    try {
      if (opt->get_expected_max() > 1) {
        for (const auto& part : CLI::detail::split(*value, ',')) opt->add_result(trim(part));
      } else {
        opt->add_result(*value);
      }
      opt->run_callback();
    } catch (const CLI::Error& e) {
      throw UserError("invalid value '" + *value + "' for " + name + ": " + e.what());
    }
  }
}

std::map<std::string, std::string> resolved_options(const CLI::App& sub) {
  std::map<std::string, std::string> out;
  for (const CLI::Option* opt : sub.get_options()) {
    const std::string name = long_name(*opt);
    if (skip_option(name)) continue;
    std::string v;
    if (opt->count() > 0) {
      const auto& r = opt->results();
      for (std::size_t i = 0; i < r.size(); ++i) v += (i ? "," : "") + r[i];
    } else {
      v = opt->get_default_str();
    }
    out[name] = v;
  }
  return out;
}

void write_resolved_config(const std::filesystem::path& path, const std::string& section,
                           const std::map<std::string, std::string>& opts) {
  std::ofstream out(path);
  if (!out) throw UserError("cannot write " + path.string());
  out << "[" << section << "]\n";
  for (const auto& [k, v] : opts) {
    if (!v.empty()) out << k << " = " << v << '\n';
  }
}

OutputRecord record_output(const std::filesystem::path& out_dir, const std::filesystem::path& file) {
  std::ifstream in(file, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read output " + file.string());
  std::uint64_t h = 0xcbf29ce484222325ULL;
  std::vector<char> buf(1 << 16);
  while (in) {
    in.read(buf.data(), static_cast<std::streamsize>(buf.size()));
    const auto n = static_cast<std::size_t>(in.gcount());
    h = fnv1a64(std::span(reinterpret_cast<const unsigned char*>(buf.data()), n), h);
  }
  OutputRecord r;
  r.path = std::filesystem::relative(file, out_dir).generic_string();
  r.size = std::filesystem::file_size(file);
  r.fnv1a64 = hex64(h);
  return r;
}

}  // namespace edm::cli
