#include <cmath>
#include <set>

#include "ecgx/error.hpp"
#include "ecgx/finetune.hpp"
#include "json.hpp"

namespace ecgx::finetune {

using nlohmann::json;

namespace {

json parse_object(std::string_view text, const char* what) {
    json doc;
    try {
        doc = json::parse(text);
    } catch (const json::exception& e) {
        fail(ErrorCode::MalformedJson, std::string(what) + ": " + e.what());
    }
    if (!doc.is_object()) fail(ErrorCode::MalformedJson, std::string(what) + " must be a JSON object");
    return doc;
}

// NaN and infinities have no JSON spelling; they travel as null
json num(double v) { return std::isfinite(v) ? json(v) : json(nullptr); }

double num_of(const json& v) { return v.is_null() ? std::nan("") : v.get<double>(); }

std::size_t count_of(const json& v, const char* key) {
    if (!v.is_number_integer() || v.get<long long>() < 0)
        fail(ErrorCode::InvalidOptions, std::string(key) + " must be a non-negative integer");
    return v.get<std::size_t>();
}

double real_of(const json& v, const char* key) {
    if (!v.is_number()) fail(ErrorCode::InvalidOptions, std::string(key) + " must be a number");
    return v.get<double>();
}

}  // namespace

std::string report_to_json(const TrainingReport& r) {
    json per_class = json::array();
    for (const auto& c : r.eval_f1.per_class) {
        per_class.push_back({{"name", c.name},
                             {"tp", c.tp},
                             {"fp", c.fp},
                             {"fn", c.fn},
                             {"tn", c.tn},
                             {"support", c.support},
                             {"precision", num(c.precision)},
                             {"recall", num(c.recall)},
                             {"f1", num(c.f1)}});
    }
    json train = json::array(), val = json::array();
    for (double v : r.train_loss_per_epoch) train.push_back(num(v));
    for (double v : r.val_loss_per_epoch) val.push_back(num(v));

    json doc = json::object();
    doc["n_samples"] = r.n_samples;
    doc["label_distribution"] = r.label_distribution;
    doc["base_model"] = r.base_model;
    doc["train_loss_per_epoch"] = train;
    doc["val_loss_per_epoch"] = val;
    doc["eval_f1"] = {{"per_class", per_class}, {"macro", num(r.eval_f1.macro)}, {"weighted", num(r.eval_f1.weighted)}};
    doc["best_epoch"] = r.best_epoch;
    doc["lr_used"] = num(r.lr_used);
    return doc.dump();
}

TrainingReport report_from_json(std::string_view text) {
    const json doc = parse_object(text, "report");
    for (const char* k : kReportKeys)
        if (!doc.contains(k)) fail(ErrorCode::MissingField, std::string("report lacks '") + k + "'");
    TrainingReport r;
    try {
        r.n_samples = doc["n_samples"].get<std::size_t>();
        r.label_distribution = doc["label_distribution"].get<std::map<std::string, std::size_t>>();
        r.base_model = doc["base_model"].get<std::string>();
        for (const auto& v : doc["train_loss_per_epoch"]) r.train_loss_per_epoch.push_back(num_of(v));
        for (const auto& v : doc["val_loss_per_epoch"]) r.val_loss_per_epoch.push_back(num_of(v));
        const json& f1 = doc["eval_f1"];
        for (const auto& c : f1.at("per_class")) {
            metrics::ClassScore s;
            s.name = c.at("name").get<std::string>();
            s.tp = c.at("tp").get<std::size_t>();
            s.fp = c.at("fp").get<std::size_t>();
            s.fn = c.at("fn").get<std::size_t>();
            s.tn = c.at("tn").get<std::size_t>();
            s.support = c.at("support").get<std::size_t>();
            s.precision = num_of(c.at("precision"));
            s.recall = num_of(c.at("recall"));
            s.f1 = num_of(c.at("f1"));
            r.eval_f1.per_class.push_back(std::move(s));
        }
        r.eval_f1.macro = num_of(f1.at("macro"));
        r.eval_f1.weighted = num_of(f1.at("weighted"));
        r.best_epoch = doc["best_epoch"].get<std::size_t>();
        r.lr_used = num_of(doc["lr_used"]);
    } catch (const json::exception& e) {
        fail(ErrorCode::MalformedJson, std::string("report: ") + e.what());
    }
    return r;
}

FineTuneConfig config_from_json(std::string_view text, FineTuneConfig cfg) {
    const json doc = parse_object(text, "config");
    static const std::set<std::string> known = {
        "max_epochs", "batch_size", "gamma",           "lr",   "beta1",        "beta2",      "eps",
        "weight_decay", "grad_clip_value", "patience", "val_fraction", "seed", "method", "lr_selection",
        "base_model"};
    for (const auto& [k, v] : doc.items())
        if (!known.count(k)) fail(ErrorCode::InvalidOptions, "unknown config key '" + k + "'");

    auto get = [&](const char* key) -> const json* {
        auto it = doc.find(key);
        return it == doc.end() ? nullptr : &*it;
    };
    if (auto* v = get("max_epochs")) cfg.max_epochs = count_of(*v, "max_epochs");
    if (auto* v = get("batch_size")) cfg.batch_size = count_of(*v, "batch_size");
    if (auto* v = get("patience")) cfg.patience = count_of(*v, "patience");
    if (auto* v = get("seed")) cfg.seed = count_of(*v, "seed");
    if (auto* v = get("gamma")) cfg.gamma = real_of(*v, "gamma");
    if (auto* v = get("lr")) cfg.lr = v->is_null() ? std::nullopt : std::optional<double>(real_of(*v, "lr"));
    if (auto* v = get("beta1")) cfg.adam.beta1 = real_of(*v, "beta1");
    if (auto* v = get("beta2")) cfg.adam.beta2 = real_of(*v, "beta2");
    if (auto* v = get("eps")) cfg.adam.eps = real_of(*v, "eps");
    if (auto* v = get("weight_decay")) cfg.adam.weight_decay = real_of(*v, "weight_decay");
    if (auto* v = get("grad_clip_value")) cfg.grad_clip_value = real_of(*v, "grad_clip_value");
    if (auto* v = get("val_fraction")) cfg.val_fraction = real_of(*v, "val_fraction");
    if (auto* v = get("method")) {
        const std::string s = v->is_string() ? v->get<std::string>() : "";
        if (s == "head") cfg.method = TrainingMethod::head;
        else if (s == "full") cfg.method = TrainingMethod::full;
        else fail(ErrorCode::InvalidOptions, "method must be \"head\" or \"full\"");
    }
    if (auto* v = get("lr_selection")) {
        const std::string s = v->is_string() ? v->get<std::string>() : "";
        if (s == "steepest") cfg.lr_selection = LrSelection::steepest;
        else if (s == "minimum") cfg.lr_selection = LrSelection::minimum;
        else fail(ErrorCode::InvalidOptions, "lr_selection must be \"steepest\" or \"minimum\"");
    }
    if (auto* v = get("base_model")) {
        if (!v->is_string() || v->get<std::string>().empty())
            fail(ErrorCode::InvalidOptions, "base_model must be a non-empty string");
        cfg.base_model = v->get<std::string>();
    }
    cfg.validate();
    return cfg;
}

std::string config_to_json(const FineTuneConfig& cfg) {
    json doc = {
        {"max_epochs", cfg.max_epochs},
        {"batch_size", cfg.batch_size},
        {"gamma", cfg.gamma},
        {"lr", cfg.lr ? json(*cfg.lr) : json(nullptr)},
        {"beta1", cfg.adam.beta1},
        {"beta2", cfg.adam.beta2},
        {"eps", cfg.adam.eps},
        {"weight_decay", cfg.adam.weight_decay},
        {"grad_clip_value", cfg.grad_clip_value},
        {"patience", cfg.patience},
        {"val_fraction", cfg.val_fraction},
        {"seed", cfg.seed},
        {"method", cfg.method == TrainingMethod::head ? "head" : "full"},
        {"lr_selection", cfg.lr_selection == LrSelection::steepest ? "steepest" : "minimum"},
        {"base_model", cfg.base_model},
    };
    return doc.dump();
}

}  // namespace ecgx::finetune
