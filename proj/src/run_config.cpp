#include "ehrseq/run_config.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>

namespace ehrseq {

namespace {

std::string trim(const std::string& s) {
    size_t a = s.find_first_not_of(" \t\r\n");
    if (a == std::string::npos) return "";
    size_t b = s.find_last_not_of(" \t\r\n");
    return s.substr(a, b - a + 1);
}

double parse_number(const std::string& key, std::string value) {
    value.erase(std::remove(value.begin(), value.end(), ','), value.end());
    try {
        size_t used = 0;
        const double v = std::stod(value, &used);
        if (used != value.size()) throw std::invalid_argument(value);
        return v;
    } catch (const std::exception&) {
        throw ConfigError("config: bad number for '" + key + "': " + value);
    }
}

int64_t parse_int(const std::string& key, const std::string& value) {
    const double v = parse_number(key, value);
    const int64_t i = int64_t(std::llround(v));
    if (double(i) != v) throw ConfigError("config: '" + key + "' must be an integer: " + value);
    return i;
}

bool parse_bool(const std::string& key, const std::string& value) {
    if (value == "true" || value == "1") return true;
    if (value == "false" || value == "0") return false;
    throw ConfigError("config: bad boolean for '" + key + "': " + value);
}

// "A,B->C lag=2 prob=0.8 chronic" / "... once"
PlantedRule parse_rule(const std::string& text) {
    const size_t arrow = text.find("->");
    if (arrow == std::string::npos)
        throw ConfigError("config: planted_rule needs 'TRIGGERS->EFFECT': " + text);
    PlantedRule rule;
    {
        std::istringstream ts(text.substr(0, arrow));
        std::string code;
        while (std::getline(ts, code, ',')) {
            code = trim(code);
            if (!code.empty()) rule.trigger_codes.push_back(code);
        }
    }
    std::istringstream rest(text.substr(arrow + 2));
    std::string tok;
    bool have_effect = false;
    while (rest >> tok) {
        if (!have_effect) {
            rule.effect_code = tok;
            have_effect = true;
        } else if (tok.rfind("lag=", 0) == 0) {
            rule.lag_visits = int(parse_int("planted_rule lag", tok.substr(4)));
        } else if (tok.rfind("prob=", 0) == 0) {
            rule.probability = parse_number("planted_rule prob", tok.substr(5));
        } else if (tok == "chronic") {
            rule.persistence = RulePersistence::chronic_repeat;
        } else if (tok == "once") {
            rule.persistence = RulePersistence::once;
        } else {
            throw ConfigError("config: planted_rule token not understood: " + tok);
        }
    }
    if (!have_effect) throw ConfigError("config: planted_rule missing effect code: " + text);
    return rule;
}

std::string rule_to_string(const PlantedRule& rule) {
    std::string out;
    for (size_t i = 0; i < rule.trigger_codes.size(); ++i) {
        if (i) out += ",";
        out += rule.trigger_codes[i];
    }
    out += "->" + rule.effect_code;
    out += " lag=" + std::to_string(rule.lag_visits);
    out += " prob=" + format_double(rule.probability);
    out += rule.persistence == RulePersistence::chronic_repeat ? " chronic" : " once";
    return out;
}

}  // namespace

std::string pack_mode_name(PackMode mode) {
    return mode == PackMode::cross ? "cross" : "isolated";
}

RunConfig RunConfig::from_string(const std::string& text) {
    RunConfig cfg;
    // desk-scale training defaults; published full-scale settings can still
    // be pasted over them
    cfg.opt.warmup_iters = 60;
    cfg.opt.lr_decay_iters = 600;
    cfg.opt.max_iters = 600;
    cfg.opt.batch_size = 8;
    cfg.opt.grad_accum_steps = 1;

    std::istringstream in(text);
    std::string line;
    size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        const size_t hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        line = trim(line);
        if (line.empty()) continue;

        std::string key, value;
        const size_t eq = line.find('=');
        if (eq != std::string::npos) {
            key = trim(line.substr(0, eq));
            value = trim(line.substr(eq + 1));
        } else {
            const size_t sp = line.find_first_of(" \t");
            if (sp == std::string::npos)
                throw ConfigError("config line " + std::to_string(line_no) + ": expected 'key = value'");
            key = trim(line.substr(0, sp));
            value = trim(line.substr(sp + 1));
        }
        if (key.empty() || value.empty())
            throw ConfigError("config line " + std::to_string(line_no) + ": expected 'key = value'");

        if (key == "seed") cfg.seed = uint64_t(parse_int(key, value));
        else if (key == "n_patients") cfg.cohort.n_patients = int(parse_int(key, value));
        else if (key == "n_diagnosis_codes") cfg.cohort.n_diagnosis_codes = int(parse_int(key, value));
        else if (key == "n_medication_codes") cfg.cohort.n_medication_codes = int(parse_int(key, value));
        else if (key == "n_lab_codes") cfg.cohort.n_lab_codes = int(parse_int(key, value));
        else if (key == "n_demographic_groups") cfg.cohort.n_demographic_groups = int(parse_int(key, value));
        else if (key == "mean_visits") cfg.cohort.mean_visits = parse_number(key, value);
        else if (key == "mean_gap_days") cfg.cohort.mean_gap_days = parse_number(key, value);
        else if (key == "diag_per_visit") cfg.cohort.diag_per_visit = parse_number(key, value);
        else if (key == "med_per_visit") cfg.cohort.med_per_visit = parse_number(key, value);
        else if (key == "labs_per_visit") cfg.cohort.labs_per_visit = parse_number(key, value);
        else if (key == "planted_rule") cfg.cohort.planted_rules.push_back(parse_rule(value));
        else if (key == "train_frac") cfg.split_fractions[0] = parse_number(key, value);
        else if (key == "val_frac") cfg.split_fractions[1] = parse_number(key, value);
        else if (key == "test_frac") cfg.split_fractions[2] = parse_number(key, value);
        else if (key == "n_bins") cfg.n_bins = int(parse_int(key, value));
        else if (key == "n_layer") cfg.model.n_layer = int(parse_int(key, value));
        else if (key == "n_head") cfg.model.n_head = int(parse_int(key, value));
        else if (key == "n_embd") cfg.model.n_embd = int(parse_int(key, value));
        else if (key == "block_size") cfg.model.block_size = int(parse_int(key, value));
        else if (key == "rotary") cfg.model.rotary = parse_bool(key, value);
        else if (key == "rotary_base") cfg.model.rotary_base = parse_number(key, value);
        else if (key == "bias") cfg.model.bias = parse_bool(key, value);
        else if (key == "dropout") cfg.model.dropout = parse_number(key, value);
        else if (key == "n_tokens") { /* informational; vocabulary defines it */ }
        else if (key == "temporal_decay") cfg.loss.delta = parse_number(key, value);
        else if (key == "w_min") cfg.loss.w_min = parse_number(key, value);
        else if (key == "clip_eps") cfg.loss.eps = parse_number(key, value);
        else if (key == "learning_rate") cfg.opt.peak_lr = parse_number(key, value);
        else if (key == "min_lr") cfg.opt.min_lr = parse_number(key, value);
        else if (key == "warmup_iters") cfg.opt.warmup_iters = parse_int(key, value);
        else if (key == "lr_decay_iters") cfg.opt.lr_decay_iters = parse_int(key, value);
        else if (key == "max_iters") cfg.opt.max_iters = parse_int(key, value);
        else if (key == "beta1") cfg.opt.beta1 = parse_number(key, value);
        else if (key == "beta2") cfg.opt.beta2 = parse_number(key, value);
        else if (key == "weight_decay") cfg.opt.weight_decay = parse_number(key, value);
        else if (key == "grad_clip") cfg.opt.grad_clip = parse_number(key, value);
        else if (key == "gradient_accumulation_steps") cfg.opt.grad_accum_steps = int(parse_int(key, value));
        else if (key == "batch_size") cfg.opt.batch_size = int(parse_int(key, value));
        else if (key == "decay_lr") cfg.decay_lr = parse_bool(key, value);
        else if (key == "lr_schedule") {
            if (value == "cosine") cfg.opt.cosine_decay = true;
            else if (value == "linear") cfg.opt.cosine_decay = false;
            else throw ConfigError("config: lr_schedule must be cosine or linear");
        }
        else if (key == "eval_interval") cfg.eval_interval = int(parse_int(key, value));
        else if (key == "eval_iters") cfg.eval_iters = int(parse_int(key, value));
        else if (key == "pack_mode") {
            if (value == "cross") cfg.pack_mode = PackMode::cross;
            else if (value == "isolated") cfg.pack_mode = PackMode::isolated;
            else throw ConfigError("config: pack_mode must be cross or isolated");
        }
        else if (key == "condition") cfg.condition = value;
        else if (key == "horizons") {
            cfg.horizons_days.clear();
            std::istringstream hs(value);
            std::string h;
            while (std::getline(hs, h, ','))
                cfg.horizons_days.push_back(int(parse_int(key, trim(h))));
            if (cfg.horizons_days.empty()) throw ConfigError("config: horizons is empty");
        }
        else if (key == "query_grid_size") cfg.query_grid_size = int(parse_int(key, value));
        else if (key == "bootstrap_resamples") cfg.bootstrap_resamples = int(parse_int(key, value));
        else throw ConfigError("config: unknown key '" + key + "'");
    }

    cfg.cohort.rng_seed = cfg.seed;
    return cfg;
}

RunConfig RunConfig::from_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file: " + path);
    std::stringstream buf;
    buf << in.rdbuf();
    return from_string(buf.str());
}

std::string RunConfig::resolved_text() const {
    std::vector<std::pair<std::string, std::string>> kv;
    auto put = [&](const std::string& k, const std::string& v) { kv.emplace_back(k, v); };
    auto put_num = [&](const std::string& k, double v) { put(k, format_double(v)); };
    auto put_int = [&](const std::string& k, int64_t v) { put(k, std::to_string(v)); };
    auto put_bool = [&](const std::string& k, bool v) { put(k, v ? "true" : "false"); };

    put_int("seed", int64_t(seed));
    put_int("n_patients", cohort.n_patients);
    put_int("n_diagnosis_codes", cohort.n_diagnosis_codes);
    put_int("n_medication_codes", cohort.n_medication_codes);
    put_int("n_lab_codes", cohort.n_lab_codes);
    put_int("n_demographic_groups", cohort.n_demographic_groups);
    put_num("mean_visits", cohort.mean_visits);
    put_num("mean_gap_days", cohort.mean_gap_days);
    put_num("diag_per_visit", cohort.diag_per_visit);
    put_num("med_per_visit", cohort.med_per_visit);
    put_num("labs_per_visit", cohort.labs_per_visit);
    put_num("train_frac", split_fractions[0]);
    put_num("val_frac", split_fractions[1]);
    put_num("test_frac", split_fractions[2]);
    put_int("n_bins", n_bins);
    put_int("n_layer", model.n_layer);
    put_int("n_head", model.n_head);
    put_int("n_embd", model.n_embd);
    put_int("block_size", model.block_size);
    put_bool("rotary", model.rotary);
    put_num("rotary_base", model.rotary_base);
    put_bool("bias", model.bias);
    put_num("dropout", model.dropout);
    put_num("temporal_decay", loss.delta);
    put_num("w_min", loss.w_min);
    put_num("clip_eps", loss.eps);
    put_num("learning_rate", opt.peak_lr);
    put_num("min_lr", opt.min_lr);
    put_int("warmup_iters", opt.warmup_iters);
    put_int("lr_decay_iters", opt.lr_decay_iters);
    put_int("max_iters", opt.max_iters);
    put_num("beta1", opt.beta1);
    put_num("beta2", opt.beta2);
    put_num("weight_decay", opt.weight_decay);
    put_num("grad_clip", opt.grad_clip);
    put_int("gradient_accumulation_steps", opt.grad_accum_steps);
    put_int("batch_size", opt.batch_size);
    put_bool("decay_lr", decay_lr);
    put("lr_schedule", opt.cosine_decay ? "cosine" : "linear");
    put_int("eval_interval", eval_interval);
    put_int("eval_iters", eval_iters);
    put("pack_mode", pack_mode_name(pack_mode));
    if (!condition.empty()) put("condition", condition);
    {
        std::string hs;
        for (size_t i = 0; i < horizons_days.size(); ++i) {
            if (i) hs += ",";
            hs += std::to_string(horizons_days[i]);
        }
        put("horizons", hs);
    }
    put_int("query_grid_size", query_grid_size);
    put_int("bootstrap_resamples", bootstrap_resamples);

    std::sort(kv.begin(), kv.end());
    std::string out;
    for (const auto& [k, v] : kv) out += k + " = " + v + "\n";
    for (const auto& rule : cohort.planted_rules)
        out += "planted_rule = " + rule_to_string(rule) + "\n";
    return out;
}

std::string RunConfig::config_hash() const { return to_hex(fnv1a64(resolved_text())); }

}  // namespace ehrseq
