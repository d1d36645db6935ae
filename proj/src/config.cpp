#include "fuseloc/config.hpp"

#include <charconv>
#include <fstream>
#include <sstream>

namespace fuseloc {

namespace {

int to_int(const std::string& key, const std::string& v) {
    int out = 0;
    auto res = std::from_chars(v.data(), v.data() + v.size(), out);
    if (res.ec != std::errc() || res.ptr != v.data() + v.size())
        throw ContractError("cli", "config key '" + key + "': bad integer '" + v + "'");
    return out;
}

double to_double(const std::string& key, const std::string& v) {
    try {
        std::size_t pos = 0;
        const double out = std::stod(v, &pos);
        if (pos != v.size()) throw std::invalid_argument(v);
        return out;
    } catch (const std::exception&) {
        throw ContractError("cli", "config key '" + key + "': bad number '" + v + "'");
    }
}

std::uint64_t to_u64(const std::string& key, const std::string& v) {
    std::uint64_t out = 0;
    auto res = std::from_chars(v.data(), v.data() + v.size(), out);
    if (res.ec != std::errc() || res.ptr != v.data() + v.size())
        throw ContractError("cli", "config key '" + key + "': bad unsigned integer '" + v + "'");
    return out;
}

std::string trim(const std::string& s) {
    std::size_t a = s.find_first_not_of(" \t\r");
    std::size_t b = s.find_last_not_of(" \t\r");
    return a == std::string::npos ? std::string() : s.substr(a, b - a + 1);
}

}  // namespace

AppConfig parse_config_text(const std::string& text) {
    AppConfig cfg;
    std::istringstream is(text);
    std::string line;
    int lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        const std::size_t hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        line = trim(line);
        if (line.empty()) continue;
        const std::size_t eq = line.find('=');
        if (eq == std::string::npos)
            throw ContractError("cli", "config line " + std::to_string(lineno) + ": expected key=value");
        const std::string key = trim(line.substr(0, eq));
        const std::string value = trim(line.substr(eq + 1));
        if (key == "model_dim") {
            cfg.net.attn.dim = to_int(key, value);
            cfg.net.point.sa2_dim = cfg.net.attn.dim;
        } else if (key == "heads") cfg.net.attn.heads = to_int(key, value);
        else if (key == "dropout") cfg.net.attn.dropout = to_double(key, value);
        else if (key == "ffn_hidden") cfg.net.attn.ffn_hidden = to_int(key, value);
        else if (key == "itm_depth") cfg.net.attn.depth = to_int(key, value);
        else if (key == "patch_size") cfg.net.patch_size = to_int(key, value);
        else if (key == "stem_channels") cfg.net.stem_channels = to_int(key, value);
        else if (key == "stem_dim") cfg.net.point.stem_dim = to_int(key, value);
        else if (key == "knn_k") cfg.net.point.k = to_int(key, value);
        else if (key == "sa1_points") cfg.net.point.sa1_points = to_int(key, value);
        else if (key == "sa1_dim") cfg.net.point.sa1_dim = to_int(key, value);
        else if (key == "sa2_points") cfg.net.point.sa2_points = to_int(key, value);
        else if (key == "sa2_dim") {
            cfg.net.point.sa2_dim = to_int(key, value);
        } else if (key == "clusters") cfg.net.vlad.clusters = to_int(key, value);
        else if (key == "groups") cfg.net.vlad.groups = to_int(key, value);
        else if (key == "lambda") cfg.net.vlad.expansion = to_int(key, value);
        else if (key == "batch_size") cfg.train.batch_size = to_int(key, value);
        else if (key == "lr") cfg.train.lr = to_double(key, value);
        else if (key == "momentum") cfg.train.momentum = to_double(key, value);
        else if (key == "weight_decay") cfg.train.weight_decay = to_double(key, value);
        else if (key == "margin") cfg.train.margin = to_double(key, value);
        else if (key == "d_pos") cfg.train.d_pos = to_double(key, value);
        else if (key == "d_neg") cfg.train.d_neg = to_double(key, value);
        else if (key == "epochs") {
            cfg.train.epochs = to_int(key, value);
            cfg.train.steps = 0;  // epochs take effect unless steps is set later
        } else if (key == "steps") cfg.train.steps = to_int(key, value);
        else if (key == "tuples") cfg.train.tuples = to_int(key, value);
        else if (key == "seed") cfg.train.seed = to_u64(key, value);
        else throw ContractError("cli", "unknown config key '" + key + "'");
    }
    cfg.validate();
    return cfg;
}

AppConfig parse_config_file(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw IoError("cli", "cannot open config '" + path + "'");
    std::stringstream ss;
    ss << is.rdbuf();
    return parse_config_text(ss.str());
}

}  // namespace fuseloc
