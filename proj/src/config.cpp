#include "hsae/config.hpp"

#include <charconv>
#include <fstream>
#include <functional>
#include <sstream>

namespace hsae {

namespace {

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return {};
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

struct TypeMismatch {
    std::string expected;
};

double as_real(const std::string& v) {
    double out = 0.0;
    const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (ec != std::errc() || ptr != v.data() + v.size()) throw TypeMismatch{"a real number"};
    return out;
}

std::uint64_t as_count(const std::string& v) {
    std::uint64_t out = 0;
    const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (ec != std::errc() || ptr != v.data() + v.size()) throw TypeMismatch{"a non-negative integer"};
    return out;
}

Index as_index(const std::string& v) { return static_cast<Index>(as_count(v)); }

bool as_flag(const std::string& v) {
    if (v == "true" || v == "1" || v == "on" || v == "yes") return true;
    if (v == "false" || v == "0" || v == "off" || v == "no") return false;
    throw TypeMismatch{"a boolean (true/false)"};
}

struct KeySpec {
    const char* section;
    const char* key;
    std::function<void(RunConfig&, const std::string&)> set;
};

const std::vector<KeySpec>& key_table() {
    static const std::vector<KeySpec> table = {
        // model
        {"model", "d", [](RunConfig& c, const std::string& v) { c.train.model.d = c.data.dict.d = as_index(v); }},
        {"model", "m_top", [](RunConfig& c, const std::string& v) { c.train.model.m_top = as_index(v); }},
        {"model", "k", [](RunConfig& c, const std::string& v) { c.train.model.k = as_index(v); }},
        {"model", "a", [](RunConfig& c, const std::string& v) { c.train.model.a = as_index(v); }},
        {"model", "s", [](RunConfig& c, const std::string& v) { c.train.model.s = as_index(v); }},
        {"model", "alpha", [](RunConfig& c, const std::string& v) { c.train.model.alpha = as_real(v); }},
        {"model", "slope", [](RunConfig& c, const std::string& v) { c.train.model.slope = as_real(v); }},
        {"model", "beta", [](RunConfig& c, const std::string& v) { c.train.model.beta = as_real(v); }},
        {"model", "lambda1", [](RunConfig& c, const std::string& v) { c.train.model.lambda1 = as_real(v); }},
        {"model", "lambda2", [](RunConfig& c, const std::string& v) { c.train.model.lambda2 = as_real(v); }},
        {"model", "use_bias", [](RunConfig& c, const std::string& v) { c.train.model.use_bias = as_flag(v); }},
        // optim
        {"optim", "lr_peak", [](RunConfig& c, const std::string& v) { c.train.opt.lr_peak = as_real(v); }},
        {"optim", "lr_init", [](RunConfig& c, const std::string& v) { c.train.opt.lr_init = as_real(v); }},
        {"optim", "warmup_steps", [](RunConfig& c, const std::string& v) { c.train.opt.warmup_steps = as_count(v); }},
        {"optim", "total_steps", [](RunConfig& c, const std::string& v) { c.train.opt.total_steps = as_count(v); }},
        {"optim", "clip_norm", [](RunConfig& c, const std::string& v) { c.train.opt.clip_norm = as_real(v); }},
        {"optim", "b1", [](RunConfig& c, const std::string& v) { c.train.opt.b1 = as_real(v); }},
        {"optim", "b2", [](RunConfig& c, const std::string& v) { c.train.opt.b2 = as_real(v); }},
        {"optim", "eps_adam", [](RunConfig& c, const std::string& v) { c.train.opt.eps_adam = as_real(v); }},
        // train
        {"train", "epochs", [](RunConfig& c, const std::string& v) { c.train.epochs = as_count(v); }},
        {"train", "batch_size", [](RunConfig& c, const std::string& v) { c.train.batch_size = as_index(v); }},
        {"train", "mode", [](RunConfig& c, const std::string& v) {
             try {
                 c.train.mode = parse_train_mode(v);
             } catch (const std::invalid_argument&) {
                 throw TypeMismatch{"one of hsae, baseline, baseline_with_aux"};
             }
         }},
        {"train", "ortho", [](RunConfig& c, const std::string& v) { c.train.toggles.ortho = as_flag(v); }},
        {"train", "l1", [](RunConfig& c, const std::string& v) { c.train.toggles.l1 = as_flag(v); }},
        {"train", "top_recon", [](RunConfig& c, const std::string& v) { c.train.toggles.top_recon = as_flag(v); }},
        {"train", "ortho_form", [](RunConfig& c, const std::string& v) {
             if (v == "encoder_decoder") c.train.ortho_form = OrthoForm::encoder_decoder;
             else if (v == "decoder_encoder") c.train.ortho_form = OrthoForm::decoder_encoder;
             else throw TypeMismatch{"encoder_decoder or decoder_encoder"};
         }},
        {"train", "l1_form", [](RunConfig& c, const std::string& v) {
             if (v == "outside_topk") c.train.l1_form = L1Form::outside_topk;
             else if (v == "all_codes") c.train.l1_form = L1Form::all_codes;
             else throw TypeMismatch{"outside_topk or all_codes"};
         }},
        {"train", "aux_coeff", [](RunConfig& c, const std::string& v) { c.train.aux_coeff = as_real(v); }},
        {"train", "k_aux", [](RunConfig& c, const std::string& v) { c.train.k_aux = as_index(v); }},
        {"train", "ema_window_batches", [](RunConfig& c, const std::string& v) { c.train.ema_window_batches = as_count(v); }},
        {"train", "checkpoint_every", [](RunConfig& c, const std::string& v) { c.train.checkpoint_every = as_count(v); }},
        {"train", "log_every", [](RunConfig& c, const std::string& v) { c.train.log_every = as_count(v); }},
        {"train", "renorm_expert_decoders", [](RunConfig& c, const std::string& v) { c.train.renorm_expert_decoders = as_flag(v); }},
        {"train", "threads", [](RunConfig& c, const std::string& v) { c.train.threads = static_cast<unsigned>(as_count(v)); }},
        {"train", "seed", [](RunConfig& c, const std::string& v) { c.train.seed = c.data.dict.seed = as_count(v); }},
        // data
        {"data", "n_parents", [](RunConfig& c, const std::string& v) { c.data.dict.n_parents = as_index(v); }},
        {"data", "n_children", [](RunConfig& c, const std::string& v) { c.data.dict.n_children = as_index(v); }},
        {"data", "s_true", [](RunConfig& c, const std::string& v) { c.data.dict.s_true = as_index(v); }},
        {"data", "parents_per_sample", [](RunConfig& c, const std::string& v) { c.data.dict.parents_per_sample = as_real(v); }},
        {"data", "noise_sigma", [](RunConfig& c, const std::string& v) { c.data.dict.noise_sigma = as_real(v); }},
        {"data", "child_scale", [](RunConfig& c, const std::string& v) { c.data.dict.child_scale = as_real(v); }},
        {"data", "orthogonalize", [](RunConfig& c, const std::string& v) { c.data.dict.orthogonalize = as_flag(v); }},
        {"data", "n_samples", [](RunConfig& c, const std::string& v) { c.data.n_samples = as_index(v); }},
        {"data", "n_heldout", [](RunConfig& c, const std::string& v) { c.data.n_heldout = as_index(v); }},
        {"data", "n_pairs", [](RunConfig& c, const std::string& v) { c.data.n_pairs = as_index(v); }},
        {"data", "shards", [](RunConfig& c, const std::string& v) { c.data.shards = as_index(v); }},
        {"data", "whiten", [](RunConfig& c, const std::string& v) { c.data.whiten = as_flag(v); }},
        // eval
        {"eval", "top_n", [](RunConfig& c, const std::string& v) { c.eval.top_n = as_index(v); }},
        {"eval", "top_m", [](RunConfig& c, const std::string& v) { c.eval.top_m = as_index(v); }},
        {"eval", "max_rows", [](RunConfig& c, const std::string& v) { c.eval.max_rows = as_index(v); }},
    };
    return table;
}

}  // namespace

RunConfig default_run_config() {
    RunConfig c;
    c.data.dict.d = c.train.model.d;
    c.data.dict.seed = c.train.seed;
    return c;
}

std::vector<std::string> config_keys() {
    std::vector<std::string> out;
    for (const auto& k : key_table()) out.push_back(std::string(k.section) + "." + k.key);
    return out;
}

RunConfig parse_config_text(const std::string& text, const std::string& origin) {
    RunConfig cfg = default_run_config();
    std::istringstream is(text);
    std::string raw, section;
    std::size_t lineno = 0;
    auto where = [&]() { return origin + ":" + std::to_string(lineno); };
    while (std::getline(is, raw)) {
        ++lineno;
        const auto hash = raw.find('#');
        const std::string line = trim(hash == std::string::npos ? raw : raw.substr(0, hash));
        if (line.empty()) continue;
        if (line.front() == '[') {
            if (line.back() != ']') throw ConfigError(where() + ": malformed section header '" + line + "'");
            section = trim(line.substr(1, line.size() - 2));
            bool known = false;
            for (const auto& k : key_table()) known |= section == k.section;
            if (!known) throw ConfigError(where() + ": unknown section '" + section + "'");
            continue;
        }
        const auto eq = line.find('=');
        if (eq == std::string::npos) throw ConfigError(where() + ": expected 'key = value', got '" + line + "'");
        const std::string key = trim(line.substr(0, eq));
        const std::string value = trim(line.substr(eq + 1));
        const KeySpec* spec = nullptr;
        for (const auto& k : key_table()) {
            if (key == k.key) spec = &k;
        }
        if (!spec) throw ConfigError(where() + ": unknown key '" + key + "'");
        if (!section.empty() && section != spec->section) {
            throw ConfigError(where() + ": key '" + key + "' belongs to section [" + spec->section + "], not [" +
                              section + "]");
        }
        try {
            spec->set(cfg, value);
        } catch (const TypeMismatch& tm) {
            throw ConfigError(where() + ": key '" + key + "' expects " + tm.expected + ", got '" + value + "'");
        }
    }
    return cfg;
}

RunConfig parse_config(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw ConfigError(path + ": cannot open config file");
    std::ostringstream ss;
    ss << is.rdbuf();
    return parse_config_text(ss.str(), path);
}

}  // namespace hsae
