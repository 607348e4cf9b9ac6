#include "mitodet/config.hpp"

#include <fstream>
#include <sstream>
#include <stdexcept>

namespace mitodet {

namespace {

std::string trim(const std::string& s) {
    const auto a = s.find_first_not_of(" \t\r\n");
    if (a == std::string::npos) return "";
    const auto b = s.find_last_not_of(" \t\r\n");
    return s.substr(a, b - a + 1);
}

}  // namespace

const std::vector<ConfigKey>& Config::registry() {
    static const std::vector<ConfigKey> keys = {
        {"seed", "0", "master seed for every RNG stream"},
        {"workers", "1", "worker threads for patch-level parallelism"},

        {"tile.patch_size", "512", "square patch side in pixels"},
        {"tile.overlap", "0.2", "fractional overlap between adjacent patches"},
        {"tile.annotation_box_size", "50",
         "side of the box a center annotation expands to"},

        {"split.train", "0.7", "training fraction of the image-level split"},
        {"split.val", "0.1", "validation fraction"},
        {"split.test", "0.2", "test fraction"},

        {"synth.n_images", "20", "synthetic corpus: number of images"},
        {"synth.size", "1024", "synthetic corpus: square image side"},
        {"synth.blobs", "15", "synthetic corpus: planted blobs per image"},
        {"synth.distractors", "10",
         "synthetic corpus: hard-negative artifacts per image"},

        {"proposer.input_size", "512", "proposal network input side"},
        {"proposer.conf_threshold", "0.2", "stage-1 confidence threshold"},
        {"proposer.nms_iou", "0.3", "stage-1 NMS IoU threshold"},
        {"proposer.width_mult", "0.25", "channel width multiplier"},
        {"proposer.depth_mult", "0.33", "block depth multiplier"},
        {"proposer.reg_max", "16", "DFL bins per box side"},
        {"proposer.ema_groups", "32", "channel groups in EMA attention"},
        {"proposer.n_psa_blocks", "1", "attention units in C2PSA"},
        {"proposer.lsconv_large_kernel", "7", "LSConv large depthwise kernel"},
        {"proposer.lsconv_small_kernel", "3", "LSConv small dynamic kernel"},
        {"proposer.improved", "true",
         "build the improved topology (false = baseline)"},

        {"train.proposer.lr_initial", "0.001", "cosine schedule start"},
        {"train.proposer.lr_final", "0.00001", "cosine schedule end"},
        {"train.proposer.weight_decay", "0.0005", "AdamW weight decay"},
        {"train.proposer.epochs", "300", "training epochs"},
        {"train.proposer.batch_size", "960", "patches per optimizer step"},
        {"train.proposer.patches_per_epoch", "0",
         "patch subsample per epoch (0 = all)"},
        {"train.proposer.loss_box", "7.5", "box regression loss weight"},
        {"train.proposer.loss_cls", "0.5", "classification loss weight"},
        {"train.proposer.loss_dfl", "1.5", "distribution-focal loss weight"},

        {"classifier.input_size", "64", "candidate crop side after resize"},
        {"classifier.crop_margin", "0",
         "context margin (fraction of box size) around candidate crops"},
        {"classifier.depths", "3,3,9,3", "blocks per stage"},
        {"classifier.dims", "96,192,384,768", "channels per stage"},
        {"classifier.norm_mean", "0.485,0.456,0.406",
         "per-channel normalization mean"},
        {"classifier.norm_std", "0.229,0.224,0.225",
         "per-channel normalization std"},

        {"loss.alpha_mitosis", "1.0", "focal weight for the mitosis class"},
        {"loss.alpha_background", "1.5", "focal weight for the background class"},
        {"loss.gamma", "2.0", "focal focusing parameter"},
        {"loss.temperature", "0.2", "contrastive temperature"},
        {"loss.lambda", "1.0", "contrastive weight in the total loss"},
        {"loss.contrastive_include_self", "true",
         "keep j = i in the contrastive denominator"},

        {"train.classifier.lr_initial", "0.0003", "cosine schedule start"},
        {"train.classifier.lr_final", "0.000001", "cosine schedule end"},
        {"train.classifier.weight_decay", "0.00001", "AdamW weight decay"},
        {"train.classifier.epochs", "400", "maximum training epochs"},
        {"train.classifier.patience", "60", "early-stop patience on val F1"},
        {"train.classifier.batch_size", "960", "crops per optimizer step"},

        {"augment.det.rotation_max_deg", "180", "detection rotation upper bound"},
        {"augment.det.flip_p", "0.5", "detection H/V flip probability"},
        {"augment.det.mixup_p", "0.3", "detection mixup probability"},
        {"augment.det.mosaic_p", "1.0", "mosaic probability while active"},
        {"augment.det.mosaic_epochs", "20", "epochs with mosaic enabled"},
        {"augment.det.randaug_ops", "2", "RandAugment op count"},
        {"augment.det.randaug_magnitude", "9", "RandAugment magnitude"},
        {"augment.det.erase_p", "0.4", "random erasing probability"},
        {"augment.det.erase_min", "0.02", "erase area ratio lower bound"},
        {"augment.det.erase_max", "0.1", "erase area ratio upper bound"},

        {"augment.cls.flip_p", "0.5", "classifier flip probability"},
        {"augment.cls.rotation_max_deg", "15", "classifier rotation bound"},
        {"augment.cls.jitter_brightness", "0.2", "ColorJitter brightness"},
        {"augment.cls.jitter_contrast", "0.2", "ColorJitter contrast"},
        {"augment.cls.jitter_saturation", "0.1", "ColorJitter saturation"},
        {"augment.cls.mixup_p", "0.2", "classifier mixup probability"},
        {"augment.cls.randaug_ops", "3", "RandAugment op count"},
        {"augment.cls.randaug_magnitude", "5", "RandAugment magnitude"},
        {"augment.cls.erase_p", "0.5", "half-erasing probability"},
        {"augment.cls.erase_min", "0.02", "erase area ratio lower bound"},
        {"augment.cls.erase_max", "0.15", "erase area ratio upper bound"},
        {"augment.cls.half_erase", "true",
         "constrain erasing to one uniformly-chosen image half"},

        {"pipeline.classifier_threshold", "0.5",
         "candidates with classification scores below this are rejected"},
        {"pipeline.merge_iou", "0.5", "cross-patch merge IoU threshold"},

        {"eval.rule", "center:30", "matching rule: center:<px> or iou:<ratio>"},
    };
    return keys;
}

Config::Config() {
    for (const auto& k : registry()) values_[k.key] = k.default_value;
}

void Config::load_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("config: cannot open '" + path + "'");
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        line = trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos) {
            throw std::invalid_argument("config: line " + std::to_string(lineno) +
                                        ": expected 'key = value'");
        }
        set(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
    }
}

void Config::set_kv(const std::string& kv) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) {
        throw std::invalid_argument("config: expected key=value, got '" + kv + "'");
    }
    set(trim(kv.substr(0, eq)), trim(kv.substr(eq + 1)));
}

void Config::set(const std::string& key, const std::string& value) {
    if (!values_.count(key)) {
        throw std::invalid_argument("config: unknown key '" + key + "'");
    }
    values_[key] = value;
}

bool Config::has(const std::string& key) const { return values_.count(key) > 0; }

std::string Config::get_string(const std::string& key) const {
    const auto it = values_.find(key);
    if (it == values_.end()) {
        throw std::invalid_argument("config: unknown key '" + key + "'");
    }
    return it->second;
}

double Config::get_double(const std::string& key) const {
    const std::string v = get_string(key);
    try {
        std::size_t pos = 0;
        const double d = std::stod(v, &pos);
        if (pos != v.size()) throw std::invalid_argument(v);
        return d;
    } catch (const std::exception&) {
        throw std::invalid_argument("config: '" + key + "' is not a number: " + v);
    }
}

std::int64_t Config::get_int(const std::string& key) const {
    const std::string v = get_string(key);
    try {
        std::size_t pos = 0;
        const long long i = std::stoll(v, &pos);
        if (pos != v.size()) throw std::invalid_argument(v);
        return i;
    } catch (const std::exception&) {
        throw std::invalid_argument("config: '" + key + "' is not an integer: " + v);
    }
}

bool Config::get_bool(const std::string& key) const {
    const std::string v = get_string(key);
    if (v == "true" || v == "1" || v == "yes") return true;
    if (v == "false" || v == "0" || v == "no") return false;
    throw std::invalid_argument("config: '" + key + "' is not a boolean: " + v);
}

std::vector<std::int64_t> Config::get_int_list(const std::string& key) const {
    std::vector<std::int64_t> out;
    std::stringstream ss(get_string(key));
    std::string item;
    while (std::getline(ss, item, ',')) {
        if (trim(item).empty()) continue;
        out.push_back(std::stoll(trim(item)));
    }
    return out;
}

std::vector<double> Config::get_double_list(const std::string& key) const {
    std::vector<double> out;
    std::stringstream ss(get_string(key));
    std::string item;
    while (std::getline(ss, item, ',')) {
        if (trim(item).empty()) continue;
        out.push_back(std::stod(trim(item)));
    }
    return out;
}

std::string Config::to_text() const {
    std::ostringstream os;
    for (const auto& [k, v] : values_) os << k << " = " << v << "\n";
    return os.str();
}

}  // namespace mitodet
