#include "ubench/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <sstream>

namespace ubench {

namespace {

constexpr const char* kMagic = "UBENCH-CKPT 1";

void write_le(std::ostream& os, double v) {
    std::uint64_t bits;
    std::memcpy(&bits, &v, sizeof bits);
    unsigned char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>((bits >> (8 * i)) & 0xff);
    os.write(reinterpret_cast<const char*>(b), 8);
}

double read_le(std::istream& is) {
    unsigned char b[8];
    if (!is.read(reinterpret_cast<char*>(b), 8)) throw ParseError("checkpoint: truncated payload");
    std::uint64_t bits = 0;
    for (int i = 0; i < 8; ++i) bits |= static_cast<std::uint64_t>(b[i]) << (8 * i);
    double v;
    std::memcpy(&v, &bits, sizeof v);
    return v;
}

std::string read_line(std::istream& is, const char* what) {
    std::string line;
    if (!std::getline(is, line)) throw ParseError(std::string("checkpoint: missing ") + what);
    return line;
}

}  // namespace

void Checkpoint::put(std::string name, std::vector<double> values) {
    if (name.empty() || name.find_first_of(" \n") != std::string::npos)
        throw ParameterError("checkpoint section names must be non-empty without spaces");
    for (auto& [n, v] : sections) {
        if (n == name) {
            v = std::move(values);
            return;
        }
    }
    sections.emplace_back(std::move(name), std::move(values));
}

const std::vector<double>& Checkpoint::get(const std::string& name) const {
    for (const auto& [n, v] : sections)
        if (n == name) return v;
    throw ParseError("checkpoint: missing section '" + name + "'");
}

bool Checkpoint::has(const std::string& name) const {
    for (const auto& s : sections)
        if (s.first == name) return true;
    return false;
}

void write_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
    const auto tmp = path.string() + ".tmp";
    {
        std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
        if (!os) throw Error("cannot write checkpoint " + tmp);
        os << kMagic << '\n' << ckpt.meta.dump() << '\n' << ckpt.sections.size() << '\n';
        for (const auto& [name, values] : ckpt.sections) {
            os << name << ' ' << values.size() << '\n';
            for (double v : values) write_le(os, v);
            os << '\n';
        }
        os << "END\n";
        if (!os) throw Error("error writing checkpoint " + tmp);
    }
    std::filesystem::rename(tmp, path);
}

Checkpoint read_checkpoint(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw ParseError("cannot open checkpoint " + path.string());
    if (read_line(is, "header") != kMagic) throw ParseError("checkpoint: bad magic in " + path.string());
    Checkpoint ckpt;
    try {
        ckpt.meta = nlohmann::json::parse(read_line(is, "meta"));
    } catch (const nlohmann::json::exception& e) {
        throw ParseError(std::string("checkpoint: bad meta JSON: ") + e.what());
    }
    const std::size_t n = std::stoull(read_line(is, "section count"));
    for (std::size_t s = 0; s < n; ++s) {
        std::istringstream hdr(read_line(is, "section header"));
        std::string name;
        std::size_t count = 0;
        if (!(hdr >> name >> count)) throw ParseError("checkpoint: bad section header");
        std::vector<double> values(count);
        for (auto& v : values) v = read_le(is);
        if (is.get() != '\n') throw ParseError("checkpoint: missing section terminator");
        ckpt.sections.emplace_back(std::move(name), std::move(values));
    }
    if (read_line(is, "END marker") != "END") throw ParseError("checkpoint: missing END marker");
    return ckpt;
}

nlohmann::json to_json(const net::PredictorConfig& c) {
    return {{"input_dim", c.input_dim},
            {"hidden_widths", c.hidden_widths},
            {"feature_dim", c.feature_dim},
            {"num_classes", c.num_classes},
            {"head", net::to_string(c.head)},
            {"heads", c.heads},
            {"dropout_rate", c.dropout_rate},
            {"spectral_norm", c.spectral_norm},
            {"size_tier", net::to_string(c.size_tier)}};
}

net::PredictorConfig predictor_config_from_json(const nlohmann::json& j) {
    net::PredictorConfig c;
    c.input_dim = j.at("input_dim").get<std::size_t>();
    c.hidden_widths = j.at("hidden_widths").get<std::vector<std::size_t>>();
    c.feature_dim = j.at("feature_dim").get<std::size_t>();
    c.num_classes = j.at("num_classes").get<std::size_t>();
    c.head = net::parse_head_kind(j.at("head").get<std::string>());
    c.heads = j.at("heads").get<std::size_t>();
    c.dropout_rate = j.at("dropout_rate").get<double>();
    c.spectral_norm = j.at("spectral_norm").get<bool>();
    c.size_tier = net::parse_size_tier(j.at("size_tier").get<std::string>());
    c.validate();
    return c;
}

void store_predictor(Checkpoint& ckpt, const std::string& prefix, const net::Predictor& p) {
    ckpt.meta[prefix] = to_json(p.config());
    ckpt.put(prefix + ".params", net::flatten(p.params()));
    if (p.config().spectral_norm) {
        std::vector<double> sv;
        for (const auto& s : p.spectral_state()) {
            sv.insert(sv.end(), s.u.data(), s.u.data() + s.u.size());
            sv.insert(sv.end(), s.v.data(), s.v.data() + s.v.size());
        }
        ckpt.put(prefix + ".spectral", std::move(sv));
    }
}

net::Predictor load_predictor(const Checkpoint& ckpt, const std::string& prefix) {
    if (!ckpt.meta.contains(prefix)) throw ParseError("checkpoint: missing predictor '" + prefix + "'");
    net::Predictor p(predictor_config_from_json(ckpt.meta.at(prefix)), 0);
    net::ParamSet params = p.params();
    net::unflatten(ckpt.get(prefix + ".params"), params);
    p.set_params(std::move(params));
    if (p.config().spectral_norm) {
        const auto& sv = ckpt.get(prefix + ".spectral");
        std::vector<net::SpectralState> state;
        std::size_t k = 0;
        for (const auto& layer : p.params()) {
            if (state.size() == p.config().featurizer_depth()) break;
            net::SpectralState s{Vector(layer.weight.rows()), Vector(layer.weight.cols())};
            if (k + static_cast<std::size_t>(s.u.size() + s.v.size()) > sv.size())
                throw ParseError("checkpoint: spectral section too short");
            for (Eigen::Index i = 0; i < s.u.size(); ++i) s.u(i) = sv[k++];
            for (Eigen::Index i = 0; i < s.v.size(); ++i) s.v(i) = sv[k++];
            state.push_back(std::move(s));
        }
        if (k != sv.size()) throw ParseError("checkpoint: spectral section has trailing values");
        p.set_spectral_state(std::move(state));
    }
    return p;
}

}  // namespace ubench
