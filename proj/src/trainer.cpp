#include "cdr/trainer.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <iostream>
#include <numeric>
#include <set>
#include <sstream>

#include "cdr/io.hpp"

namespace cdr {

namespace {

constexpr std::uint64_t kOrderStream = 21;
constexpr std::uint64_t kPartnerStream = 22;

template <class T>
T get_as(const nlohmann::json& v, const std::string& key) {
    try {
        return v.get<T>();
    } catch (const nlohmann::json::exception&) {
        throw ConfigError("config key '" + key + "' has the wrong type: " + v.dump());
    }
}

std::size_t get_size(const nlohmann::json& v, const std::string& key) {
    if (!v.is_number_integer() || v.get<long long>() < 0) {
        throw ConfigError("config key '" + key + "' must be a non-negative integer, got " + v.dump());
    }
    return v.get<std::size_t>();
}

void put_u64_le(std::string& out, double v) {
    std::uint64_t bits;
    std::memcpy(&bits, &v, sizeof bits);
    for (int b = 0; b < 8; ++b) {
        out.push_back(static_cast<char>((bits >> (8 * b)) & 0xFF));
    }
}

double get_u64_le(const std::string& in, std::size_t offset) {
    std::uint64_t bits = 0;
    for (int b = 0; b < 8; ++b) {
        bits |= static_cast<std::uint64_t>(static_cast<unsigned char>(in[offset + b])) << (8 * b);
    }
    double v;
    std::memcpy(&v, &bits, sizeof v);
    return v;
}

nlohmann::ordered_json dims_json(const Model& m) {
    const auto& e = m.encoder.dims;
    return {{"vocab_size", e.vocab_size}, {"seq_len", e.seq_len},      {"d_model", e.d_model},
            {"n_blocks", e.n_blocks},     {"n_heads", e.n_heads},      {"gate_hidden", m.heads.gate_hidden},
            {"combine", to_string(m.heads.combine)}};
}

}  // namespace

const std::vector<std::string>& RunConfig::keys() {
    static const std::vector<std::string> k{
        "seeds",          "epochs",          "batch_size",         "lr",                 "momentum",
        "lambda_o",       "lambda_c",        "lambda_co",          "lambda_mix",         "K",
        "tau",            "combine",         "confounder_objective", "d_model",          "n_blocks",
        "n_heads",        "gate_hidden",     "split_fraction",     "severity_threshold", "cohort_path",
        "ood_cohort_path", "n_patients",     "cohort_seed",        "rho",                "noise_sd",
        "ood_n_patients", "ood_seed",        "gbt_rounds",         "gbt_eta",            "gbt_depth"};
    return k;
}

void RunConfig::validate() const {
    if (seeds.empty()) {
        throw ConfigError("config: seeds must be non-empty");
    }
    if (std::set<std::uint64_t>(seeds.begin(), seeds.end()).size() != seeds.size()) {
        throw ConfigError("config: seeds must be distinct");
    }
    if (!(lr >= 0.0) || !std::isfinite(lr)) {
        throw ConfigError("config: lr must be finite and >= 0");
    }
    if (!(momentum >= 0.0 && momentum < 1.0)) {
        throw ConfigError("config: momentum must lie in [0, 1)");
    }
    if (epochs == 0) {
        throw ConfigError("config: epochs must be >= 1");
    }
    if (batch_size == 0) {
        throw ConfigError("config: batch_size must be >= 1");
    }
    if (batch_size < 2 && (weights.mix > 0.0 || weights.joint > 0.0)) {
        throw ConfigError("config: batch_size must be >= 2 when lambda_mix or lambda_co > 0");
    }
    try {
        weights.validate();
    } catch (const std::invalid_argument& e) {
        throw ConfigError(std::string("config: ") + e.what());
    }
    if (mix.K == 0) {
        throw ConfigError("config: K must be >= 1");
    }
    if (!(mix.tau > 0.0)) {
        throw ConfigError("config: tau must be > 0");
    }
    if (!(split_fraction > 0.0 && split_fraction < 1.0)) {
        throw ConfigError("config: split_fraction must lie in (0, 1)");
    }
    if (!std::isfinite(severity_threshold)) {
        throw ConfigError("config: severity_threshold must be finite");
    }
    if (dims.encoder.d_model == 0 || dims.encoder.n_heads == 0 || dims.encoder.d_model % dims.encoder.n_heads != 0) {
        throw ConfigError("config: d_model must be a positive multiple of n_heads");
    }
    if (dims.encoder.n_blocks == 0 || dims.gate_hidden == 0) {
        throw ConfigError("config: n_blocks and gate_hidden must be >= 1");
    }
    if (gbt_rounds == 0 || gbt_depth == 0 || !(gbt_eta >= 0.0)) {
        throw ConfigError("config: gbt_rounds, gbt_depth must be >= 1 and gbt_eta >= 0");
    }
    if (ood_n_patients < 10) {
        throw ConfigError("config: ood_n_patients must be >= 10");
    }
    cohort.validate();
}

nlohmann::ordered_json RunConfig::to_json() const {
    nlohmann::ordered_json j;
    j["seeds"] = seeds;
    j["epochs"] = epochs;
    j["batch_size"] = batch_size;
    j["lr"] = lr;
    j["momentum"] = momentum;
    j["lambda_o"] = weights.causal;
    j["lambda_c"] = weights.confounder;
    j["lambda_co"] = weights.joint;
    j["lambda_mix"] = weights.mix;
    j["K"] = mix.K;
    j["tau"] = mix.tau;
    j["combine"] = cdr::to_string(dims.combine);
    j["confounder_objective"] = cdr::to_string(confounder_objective);
    j["d_model"] = dims.encoder.d_model;
    j["n_blocks"] = dims.encoder.n_blocks;
    j["n_heads"] = dims.encoder.n_heads;
    j["gate_hidden"] = dims.gate_hidden;
    j["split_fraction"] = split_fraction;
    j["severity_threshold"] = severity_threshold;
    j["cohort_path"] = cohort_path;
    j["ood_cohort_path"] = ood_cohort_path;
    j["n_patients"] = cohort.n_patients;
    j["cohort_seed"] = cohort.seed;
    j["rho"] = cohort.spurious_strength;
    j["noise_sd"] = cohort.noise_sd;
    j["ood_n_patients"] = ood_n_patients;
    j["ood_seed"] = ood_seed;
    j["gbt_rounds"] = gbt_rounds;
    j["gbt_eta"] = gbt_eta;
    j["gbt_depth"] = gbt_depth;
    return j;
}

RunConfig RunConfig::from_json(const nlohmann::json& j) {
    if (!j.is_object()) {
        throw ConfigError("config must be a JSON object");
    }
    RunConfig c;
    for (const auto& [key, v] : j.items()) {
        if (key == "seeds") {
            if (!v.is_array()) {
                throw ConfigError("config key 'seeds' must be an array of integers");
            }
            c.seeds.clear();
            for (const auto& s : v) {
                c.seeds.push_back(get_size(s, key));
            }
        } else if (key == "epochs") {
            c.epochs = get_size(v, key);
        } else if (key == "batch_size") {
            c.batch_size = get_size(v, key);
        } else if (key == "lr") {
            c.lr = get_as<double>(v, key);
        } else if (key == "momentum") {
            c.momentum = get_as<double>(v, key);
        } else if (key == "lambda_o") {
            c.weights.causal = get_as<double>(v, key);
        } else if (key == "lambda_c") {
            c.weights.confounder = get_as<double>(v, key);
        } else if (key == "lambda_co") {
            c.weights.joint = get_as<double>(v, key);
        } else if (key == "lambda_mix") {
            c.weights.mix = get_as<double>(v, key);
        } else if (key == "K") {
            c.mix.K = get_size(v, key);
        } else if (key == "tau") {
            c.mix.tau = get_as<double>(v, key);
        } else if (key == "combine") {
            try {
                c.dims.combine = combine_from_string(get_as<std::string>(v, key));
            } catch (const std::invalid_argument& e) {
                throw ConfigError(e.what());
            }
        } else if (key == "confounder_objective") {
            try {
                c.confounder_objective = objective_from_string(get_as<std::string>(v, key));
            } catch (const std::invalid_argument& e) {
                throw ConfigError(e.what());
            }
        } else if (key == "d_model") {
            c.dims.encoder.d_model = get_size(v, key);
        } else if (key == "n_blocks") {
            c.dims.encoder.n_blocks = get_size(v, key);
        } else if (key == "n_heads") {
            c.dims.encoder.n_heads = get_size(v, key);
        } else if (key == "gate_hidden") {
            c.dims.gate_hidden = get_size(v, key);
        } else if (key == "split_fraction") {
            c.split_fraction = get_as<double>(v, key);
        } else if (key == "severity_threshold") {
            c.severity_threshold = get_as<double>(v, key);
        } else if (key == "cohort_path") {
            c.cohort_path = get_as<std::string>(v, key);
        } else if (key == "ood_cohort_path") {
            c.ood_cohort_path = get_as<std::string>(v, key);
        } else if (key == "n_patients") {
            c.cohort.n_patients = get_size(v, key);
        } else if (key == "cohort_seed") {
            c.cohort.seed = get_size(v, key);
        } else if (key == "rho") {
            c.cohort.spurious_strength = get_as<double>(v, key);
        } else if (key == "noise_sd") {
            c.cohort.noise_sd = get_as<double>(v, key);
        } else if (key == "ood_n_patients") {
            c.ood_n_patients = get_size(v, key);
        } else if (key == "ood_seed") {
            c.ood_seed = get_size(v, key);
        } else if (key == "gbt_rounds") {
            c.gbt_rounds = get_size(v, key);
        } else if (key == "gbt_eta") {
            c.gbt_eta = get_as<double>(v, key);
        } else if (key == "gbt_depth") {
            c.gbt_depth = get_size(v, key);
        } else {
            std::string valid;
            for (const auto& k : keys()) {
                valid += (valid.empty() ? "" : ", ") + k;
            }
            throw ConfigError("unknown config key '" + key + "'; valid keys: " + valid);
        }
    }
    c.cohort.environment = Environment::train;
    c.validate();
    return c;
}

void RunConfig::apply_override(const std::string& assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string::npos || eq == 0) {
        throw ConfigError("override '" + assignment + "' is not of the form key=value");
    }
    const std::string key = assignment.substr(0, eq);
    const std::string text = assignment.substr(eq + 1);
    nlohmann::json value = nlohmann::json::parse(text, nullptr, false);
    if (value.is_discarded()) {
        value = text;
    }
    nlohmann::json merged = to_json();
    merged[key] = value;
    if (std::find(keys().begin(), keys().end(), key) == keys().end()) {
        nlohmann::json only;
        only[key] = value;
        (void)from_json(only);  // throws with the list of valid keys
    }
    *this = from_json(merged);
}

CohortConfig RunConfig::ood_cohort_config() const {
    CohortConfig c = cohort;
    c.n_patients = ood_n_patients;
    c.seed = ood_seed;
    c.environment = Environment::test_ood;
    return c;
}

std::vector<TokenSequence> encode_cohort(const std::vector<PatientRecord>& cohort, const Vocabulary& vocab) {
    std::vector<TokenSequence> seqs;
    seqs.reserve(cohort.size());
    for (const auto& r : cohort) {
        seqs.push_back(encode(r, vocab));
    }
    return seqs;
}

TrainResult train_one_seed(const RunConfig& config,
                           const std::vector<PatientRecord>& cohort,
                           const std::vector<TokenSequence>& sequences,
                           std::uint64_t seed) {
    config.validate();
    if (sequences.size() != cohort.size() || cohort.empty()) {
        throw std::invalid_argument("train_one_seed: sequences do not match the cohort");
    }
    TrainResult result;
    result.seed = seed;
    result.split = split_stratified(cohort, config.split_fraction, seed);

    std::vector<double> train_y;
    for (std::size_t i : result.split.train) {
        train_y.push_back(cohort[i].pasc_score_future);
    }
    const Summary ys = summarize(train_y);

    ModelDims dims = config.dims;
    dims.encoder.vocab_size = build_vocabulary().size();
    dims.encoder.seq_len = sequences.front().ids.size();
    result.model = init_model(seed, dims);
    Model& model = result.model;
    model.label_mean = ys.mean;
    model.label_sd = ys.sd > 0.0 ? ys.sd : 1.0;

    std::vector<Tensor> params;
    for (auto& nt : model.named()) {
        params.push_back(nt.tensor);
    }
    std::vector<std::vector<double>> velocity;
    for (const auto& p : params) {
        velocity.emplace_back(p.size(), 0.0);
    }

    Rng order_rng(derive_seed(seed, kOrderStream));
    Rng partner_rng(derive_seed(seed, kPartnerStream));
    const bool need_mix = config.weights.joint > 0.0 || config.weights.mix > 0.0;
    const double c_target = 0.0;  // training-label mean in standardized units

    std::size_t step = 0;
    for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
        std::vector<std::size_t> order = result.split.train;
        order_rng.shuffle(std::span<std::size_t>(order));
        EpochTrace tr;
        tr.epoch = epoch;
        std::size_t batches = 0;
        for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
            const std::size_t end = std::min(order.size(), start + config.batch_size);
            std::vector<const TokenSequence*> seqs;
            std::vector<double> y;
            for (std::size_t i = start; i < end; ++i) {
                seqs.push_back(&sequences[order[i]]);
                y.push_back((cohort[order[i]].pasc_score_future - model.label_mean) / model.label_sd);
            }
            ++step;
            LossParts parts;
            try {
                const auto partners =
                    need_mix ? sample_partners(seqs.size(), config.mix.K, partner_rng)
                             : std::vector<std::vector<std::size_t>>{};
                const BatchOutputs out = forward_batch(model, pack(seqs), partners);
                parts = total_loss(out, y, config.weights, config.mix, config.confounder_objective, c_target);
                if (!std::isfinite(parts.total.item())) {
                    throw NonFiniteError("total loss is not finite");
                }
                parts.total.backward();
            } catch (const NonFiniteError& e) {
                throw DivergenceError("seed " + std::to_string(seed) + ": training diverged at epoch " +
                                          std::to_string(epoch) + ", step " + std::to_string(step) + " (" +
                                          e.what() + ")",
                                      seed, epoch, step);
            }
            for (std::size_t p = 0; p < params.size(); ++p) {
                if (!params[p].has_grad()) {
                    continue;
                }
                auto g = params[p].grad();
                auto w = params[p].mutable_data();
                auto& v = velocity[p];
                for (std::size_t i = 0; i < w.size(); ++i) {
                    v[i] = config.momentum * v[i] + g[i];
                    w[i] -= config.lr * v[i];
                }
                params[p].zero_grad();
            }
            tr.causal += parts.causal;
            tr.confounder += parts.confounder;
            tr.joint += parts.joint;
            tr.mix += parts.mix;
            tr.total += parts.total.item();
            ++batches;
        }
        const double nb = static_cast<double>(batches);
        tr.causal /= nb;
        tr.confounder /= nb;
        tr.joint /= nb;
        tr.mix /= nb;
        tr.total /= nb;
        result.trace.push_back(tr);
    }
    return result;
}

std::vector<double> predict_indices(const Model& model,
                                    const std::vector<TokenSequence>& sequences,
                                    const std::vector<std::size_t>& indices,
                                    std::size_t batch_size) {
    std::vector<double> out;
    out.reserve(indices.size());
    for (std::size_t start = 0; start < indices.size(); start += batch_size) {
        std::vector<const TokenSequence*> seqs;
        for (std::size_t i = start; i < std::min(indices.size(), start + batch_size); ++i) {
            seqs.push_back(&sequences[indices[i]]);
        }
        const auto y = predict(model, pack(seqs));
        out.insert(out.end(), y.begin(), y.end());
    }
    return out;
}

std::string trace_csv(const std::vector<EpochTrace>& trace) {
    std::ostringstream out;
    out << "epoch,L_o,L_c,L_co,L_mix,total\n";
    for (const auto& t : trace) {
        out << t.epoch << ',' << format_double(t.causal) << ',' << format_double(t.confounder) << ','
            << format_double(t.joint) << ',' << format_double(t.mix) << ',' << format_double(t.total) << '\n';
    }
    return out.str();
}

void save_checkpoint(const std::string& dir,
                     const Model& model,
                     const nlohmann::ordered_json& config,
                     std::uint64_t seed,
                     std::size_t epoch) {
    std::string payload;
    auto arrays = nlohmann::ordered_json::array();
    for (const auto& nt : model.named()) {
        const std::size_t offset = payload.size();
        for (double v : nt.tensor.data()) {
            put_u64_le(payload, v);
        }
        arrays.push_back({{"name", nt.name},
                          {"shape", nt.tensor.shape()},
                          {"dtype", "float64"},
                          {"offset", offset},
                          {"bytes", payload.size() - offset}});
    }
    nlohmann::ordered_json m;
    m["format"] = "cdr-checkpoint";
    m["format_version"] = 1;
    m["byte_order"] = "little";
    m["payload"] = "checkpoint.bin";
    m["payload_bytes"] = payload.size();
    m["seed"] = seed;
    m["epoch"] = epoch;
    m["label_mean"] = model.label_mean;
    m["label_sd"] = model.label_sd;
    m["dims"] = dims_json(model);
    m["config"] = config;
    m["arrays"] = std::move(arrays);
    write_binary_file(dir + "/checkpoint.bin", payload);
    write_text_file(dir + "/checkpoint.json", m.dump(2) + "\n");
}

Model load_checkpoint(const std::string& dir, CheckpointInfo* info) {
    const auto manifest_text = read_text_file(dir + "/checkpoint.json");
    const std::string payload = read_text_file(dir + "/checkpoint.bin");
    nlohmann::ordered_json m;
    try {
        m = nlohmann::ordered_json::parse(manifest_text);
    } catch (const nlohmann::json::exception& e) {
        throw std::runtime_error(dir + "/checkpoint.json: " + e.what());
    }
    try {
        if (m.at("format") != "cdr-checkpoint" || m.at("byte_order") != "little") {
            throw std::runtime_error("not a little-endian cdr checkpoint");
        }
        const auto& d = m.at("dims");
        ModelDims dims;
        dims.encoder.vocab_size = d.at("vocab_size").get<std::size_t>();
        dims.encoder.seq_len = d.at("seq_len").get<std::size_t>();
        dims.encoder.d_model = d.at("d_model").get<std::size_t>();
        dims.encoder.n_blocks = d.at("n_blocks").get<std::size_t>();
        dims.encoder.n_heads = d.at("n_heads").get<std::size_t>();
        dims.gate_hidden = d.at("gate_hidden").get<std::size_t>();
        dims.combine = combine_from_string(d.at("combine").get<std::string>());
        Model model = init_model(0, dims);
        model.label_mean = m.at("label_mean").get<double>();
        model.label_sd = m.at("label_sd").get<double>();
        auto named = model.named();
        const auto& arrays = m.at("arrays");
        if (arrays.size() != named.size()) {
            throw std::runtime_error("expected " + std::to_string(named.size()) + " arrays, manifest lists " +
                                     std::to_string(arrays.size()));
        }
        for (std::size_t a = 0; a < named.size(); ++a) {
            const auto& entry = arrays[a];
            if (entry.at("name").get<std::string>() != named[a].name) {
                throw std::runtime_error("array " + std::to_string(a) + " is '" + entry.at("name").get<std::string>() +
                                         "', expected '" + named[a].name + "'");
            }
            if (entry.at("shape").get<Shape>() != named[a].tensor.shape()) {
                throw std::runtime_error("array '" + named[a].name + "' has shape " +
                                         shape_str(entry.at("shape").get<Shape>()) + ", expected " +
                                         shape_str(named[a].tensor.shape()));
            }
            const auto offset = entry.at("offset").get<std::size_t>();
            const auto bytes = entry.at("bytes").get<std::size_t>();
            if (bytes != 8 * named[a].tensor.size() || offset + bytes > payload.size()) {
                throw std::runtime_error("array '" + named[a].name + "' does not fit the payload");
            }
            auto w = named[a].tensor.mutable_data();
            for (std::size_t i = 0; i < w.size(); ++i) {
                w[i] = get_u64_le(payload, offset + 8 * i);
            }
            detail::check_finite(w, "load_checkpoint");
        }
        if (info) {
            info->manifest = m;
        }
        return model;
    } catch (const nlohmann::json::exception& e) {
        throw std::runtime_error(dir + "/checkpoint.json: " + e.what());
    } catch (const std::invalid_argument& e) {
        throw std::runtime_error(dir + "/checkpoint.json: " + e.what());
    }
}

std::vector<PatientRecord> load_training_cohort(const RunConfig& config) {
    if (!config.cohort_path.empty()) {
        return read_jsonl(config.cohort_path);
    }
    CohortConfig c = config.cohort;
    c.environment = Environment::train;
    return generate(c);
}

std::vector<PatientRecord> load_ood_cohort(const RunConfig& config) {
    if (!config.ood_cohort_path.empty()) {
        return read_jsonl(config.ood_cohort_path);
    }
    return generate(config.ood_cohort_config());
}

nlohmann::ordered_json split_json(const Split& split, const std::vector<PatientRecord>& cohort) {
    nlohmann::ordered_json j;
    auto ids = [&](const std::vector<std::size_t>& idx) {
        auto a = nlohmann::ordered_json::array();
        for (std::size_t i : idx) {
            a.push_back(cohort[i].patient_id);
        }
        return a;
    };
    j["n_train"] = split.train.size();
    j["n_test"] = split.test.size();
    j["train"] = ids(split.train);
    j["test"] = ids(split.test);
    return j;
}

ProtocolResult run_protocol(const RunConfig& config, const std::string& out_dir, const std::string& model_tag) {
    config.validate();
    const auto cohort = load_training_cohort(config);
    const auto ood = load_ood_cohort(config);
    const Vocabulary vocab = build_vocabulary();
    const auto seqs = encode_cohort(cohort, vocab);
    const auto ood_seqs = encode_cohort(ood, vocab);
    std::vector<std::size_t> ood_idx(ood.size());
    std::iota(ood_idx.begin(), ood_idx.end(), 0);
    std::vector<double> ood_y;
    for (const auto& r : ood) {
        ood_y.push_back(r.pasc_score_future);
    }

    ProtocolResult res;
    res.test.model = res.ood.model = model_tag;
    res.test.evaluation = "test";
    res.ood.evaluation = "test_ood";
    res.test.threshold = res.ood.threshold = config.severity_threshold;
    for (std::uint64_t seed : config.seeds) {
        TrainResult run;
        try {
            run = train_one_seed(config, cohort, seqs, seed);
        } catch (const DivergenceError&) {
            throw;
        } catch (const std::exception& e) {
            std::clog << "seed " << seed << " failed: " << e.what() << '\n';
            throw;
        }
        std::vector<double> y;
        std::vector<TokenSequence> test_seqs;
        for (std::size_t i : run.split.test) {
            y.push_back(cohort[i].pasc_score_future);
            test_seqs.push_back(seqs[i]);
        }
        res.test.rows.push_back(
            evaluate_predictions(seed, predict_indices(run.model, seqs, run.split.test), y, config.severity_threshold));
        res.ood.rows.push_back(
            evaluate_predictions(seed, predict_indices(run.model, ood_seqs, ood_idx), ood_y, config.severity_threshold));
        SaliencyTable sal = extract_saliency(run.model, test_seqs, vocab);
        sal.seed = seed;
        res.saliency.push_back(std::move(sal));
        if (!out_dir.empty()) {
            const std::string dir = out_dir + "/seed_" + std::to_string(seed);
            save_checkpoint(dir, run.model, config.to_json(), seed, config.epochs);
            write_text_file(dir + "/trace.csv", trace_csv(run.trace));
            write_text_file(dir + "/split.json", split_json(run.split, cohort).dump(2) + "\n");
        }
        res.runs.push_back(std::move(run));
    }
    return res;
}

}  // namespace cdr
