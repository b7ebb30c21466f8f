#include "nwlab/bench.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <stdexcept>

namespace nwlab {

namespace {

// cached pixel -> rain-rate lookup
const std::array<double, 256>& pixel_rain_lut() {
    static const std::array<double, 256> lut = [] {
        std::array<double, 256> t{};
        for (int p = 0; p < 256; ++p) t[static_cast<size_t>(p)] = pixel_to_rainrate(p);
        return t;
    }();
    return lut;
}

} // namespace

// --- environment -----------------------------------------------------------------

StreamEnv::StreamEnv(const ProtocolStream& stream) : stream_(stream) {
    const auto& recs = stream_.segments->records;
    episode_id_.resize(recs.size());
    frame_offset_.resize(recs.size());
    episode_len_.resize(recs.size());
    int episode = -1, offset = 0;
    for (size_t i = 0; i < recs.size(); ++i) {
        if (recs[i].episode_flag || episode < 0) {
            ++episode;
            offset = 0;
        }
        episode_id_[i] = episode;
        frame_offset_[i] = offset;
        offset += recs[i].len;
    }
    for (size_t i = recs.size(); i-- > 0;) {
        episode_len_[i] = frame_offset_[i] + recs[i].len;
        if (i + 1 < recs.size() && episode_id_[i + 1] == episode_id_[i])
            episode_len_[i] = episode_len_[i + 1];
    }
}

size_t StreamEnv::segments_() const { return stream_.segments->records.size(); }

const SequenceSample& StreamEnv::next() {
    if (awaiting_upload_)
        throw std::logic_error("StreamEnv::next called before uploading predictions");
    if (done()) throw std::logic_error("StreamEnv::next called past the end of the stream");
    awaiting_upload_ = true;
    return stream_.segments->records[pos_];
}

bool StreamEnv::current_has_target() const {
    const int end_needed = frame_offset_[pos_] + stream_.j + stream_.k;
    return end_needed <= episode_len_[pos_];
}

void StreamEnv::upload(const std::vector<std::vector<uint8_t>>& predictions) {
    if (!awaiting_upload_) throw std::logic_error("StreamEnv::upload without a pending segment");
    const auto& recs = stream_.segments->records;
    const SequenceSample& seg = recs[pos_];
    const int64_t px = seg.frame_size();
    if (static_cast<int>(predictions.size()) != stream_.k)
        throw std::runtime_error("model produced " + std::to_string(predictions.size()) +
                                 " frames instead of " + std::to_string(stream_.k) +
                                 " at sequence " + std::to_string(pos_));
    for (const auto& p : predictions)
        if (static_cast<int64_t>(p.size()) != px)
            throw std::runtime_error("model produced a wrong-shape prediction at sequence " +
                                     std::to_string(pos_));

    if (current_has_target()) {
        SequenceScore row;
        row.segment_index = static_cast<int>(pos_);
        row.counts.resize(static_cast<size_t>(stream_.k));
        row.wse.assign(static_cast<size_t>(stream_.k), 0.0);
        row.wae.assign(static_cast<size_t>(stream_.k), 0.0);
        row.se.assign(static_cast<size_t>(stream_.k), 0.0);
        row.ae.assign(static_cast<size_t>(stream_.k), 0.0);
        const auto& lut = pixel_rain_lut();
        // locate target frames in the following segments of the same episode
        for (int lead = 0; lead < stream_.k; ++lead) {
            const int frame_idx = frame_offset_[pos_] + stream_.j + lead;
            const size_t seg_idx = pos_ + static_cast<size_t>(frame_idx / stream_.j -
                                                              frame_offset_[pos_] / stream_.j);
            const int within = frame_idx % stream_.j;
            const SequenceSample& tseg = recs[seg_idx];
            const uint8_t* truth = tseg.frame(within);
            const uint8_t* tmask = tseg.frame_mask(within);
            const uint8_t* pred = predictions[static_cast<size_t>(lead)].data();
            auto& counts = row.counts[static_cast<size_t>(lead)];
            for (int64_t i = 0; i < px; ++i) {
                if (!tmask[i]) continue;
                const double pr = lut[pred[i]];
                const double tr = lut[truth[i]];
                for (size_t th = 0; th < kRainThresholds.size(); ++th) {
                    const double tau = kRainThresholds[th];
                    const bool pb = pr >= tau, tb = tr >= tau;
                    if (pb && tb) ++counts[th].tp;
                    else if (!pb && tb) ++counts[th].fn;
                    else if (pb && !tb) ++counts[th].fp;
                    else ++counts[th].tn;
                }
                const double err = pr - tr;
                const double w = rain_weight(tr);
                row.wse[static_cast<size_t>(lead)] += w * err * err;
                row.wae[static_cast<size_t>(lead)] += w * std::abs(err);
                row.se[static_cast<size_t>(lead)] += err * err;
                row.ae[static_cast<size_t>(lead)] += std::abs(err);
            }
        }
        rows_.push_back(std::move(row));
    }
    awaiting_upload_ = false;
    ++pos_;
}

SkillReport aggregate_scores(const std::vector<SequenceScore>& rows, int k) {
    SkillReport rep;
    rep.csi.assign(kRainThresholds.size(), std::numeric_limits<double>::quiet_NaN());
    rep.hss.assign(kRainThresholds.size(), std::numeric_limits<double>::quiet_NaN());
    rep.n_frames = static_cast<int64_t>(rows.size()) * k;
    if (rows.empty()) return rep;

    for (size_t th = 0; th < kRainThresholds.size(); ++th) {
        double csi_sum = 0, hss_sum = 0;
        int csi_n = 0, hss_n = 0;
        for (int lead = 0; lead < k; ++lead) {
            ConfusionCounts c;
            for (const auto& row : rows) c += row.counts[static_cast<size_t>(lead)][th];
            if (auto v = csi(c)) {
                csi_sum += *v;
                ++csi_n;
            }
            if (auto v = hss(c)) {
                hss_sum += *v;
                ++hss_n;
            }
        }
        if (csi_n) rep.csi[th] = csi_sum / csi_n;
        if (hss_n) rep.hss[th] = hss_sum / hss_n;
    }
    double wse = 0, wae = 0, se = 0, ae = 0;
    for (const auto& row : rows)
        for (int lead = 0; lead < k; ++lead) {
            wse += row.wse[static_cast<size_t>(lead)];
            wae += row.wae[static_cast<size_t>(lead)];
            se += row.se[static_cast<size_t>(lead)];
            ae += row.ae[static_cast<size_t>(lead)];
        }
    const double n = static_cast<double>(rep.n_frames);
    rep.bmse = wse / n;
    rep.bmae = wae / n;
    rep.mse = se / n;
    rep.mae = ae / n;
    return rep;
}

// --- adapters --------------------------------------------------------------------

void LastFrameModel::store(const SequenceSample& segment) {
    const int64_t px = segment.frame_size();
    last_.assign(segment.frame(segment.len - 1), segment.frame(segment.len - 1) + px);
}

std::vector<std::vector<uint8_t>> LastFrameModel::predict(int k) {
    if (last_.empty()) throw std::logic_error("LastFrameModel::predict before store");
    return std::vector<std::vector<uint8_t>>(static_cast<size_t>(k), last_);
}

std::vector<std::vector<uint8_t>> last_frame_predict(const std::vector<std::vector<uint8_t>>& inputs,
                                                     int k) {
    if (inputs.empty()) throw std::invalid_argument("last_frame_predict needs J >= 1 inputs");
    return std::vector<std::vector<uint8_t>>(static_cast<size_t>(k), inputs.back());
}

DeepModel::DeepModel(Network<float>* net, bool balanced_loss, float online_lr)
    : net_(net), balanced_(balanced_loss) {
    std::vector<Var<float>> params;
    for (auto& [name, p] : net_->parameters()) params.push_back(p);
    opt_ = std::make_unique<AdaGrad<float>>(std::move(params), online_lr);
    h_ = net_->config().frame_h;
    w_ = net_->config().frame_w;
}

void DeepModel::store(const SequenceSample& segment) {
    if (segment.episode_flag) {
        buffer_frames_.clear();
        buffer_masks_.clear();
    }
    const int64_t px = segment.frame_size();
    for (int t = 0; t < segment.len; ++t) {
        buffer_frames_.emplace_back(segment.frame(t), segment.frame(t) + px);
        buffer_masks_.emplace_back(segment.frame_mask(t), segment.frame_mask(t) + px);
    }
    // bounded history: only the most recent update window is ever used
    const size_t cap = static_cast<size_t>(net_->config().input_length + net_->config().horizon);
    while (buffer_frames_.size() > cap) {
        buffer_frames_.erase(buffer_frames_.begin());
        buffer_masks_.erase(buffer_masks_.begin());
    }
}

namespace {

TensorT<float> u8_frame_to_tensor(const std::vector<uint8_t>& frame, int h, int w) {
    TensorT<float> t({1, h, w});
    for (int64_t i = 0; i < t.numel(); ++i) t[i] = static_cast<float>(frame[static_cast<size_t>(i)]) / 255.0f;
    return t;
}

TensorT<float> u8_mask_to_tensor(const std::vector<uint8_t>& mask, int h, int w) {
    TensorT<float> t({1, h, w});
    for (int64_t i = 0; i < t.numel(); ++i) t[i] = mask[static_cast<size_t>(i)] ? 1.0f : 0.0f;
    return t;
}

} // namespace

void DeepModel::update() {
    const int j = net_->config().input_length;
    const int k = net_->config().horizon;
    const size_t window = static_cast<size_t>(j + k);
    if (buffer_frames_.size() < window) return; // not enough consecutive frames yet

    const size_t base = buffer_frames_.size() - window;
    std::vector<TensorT<float>> frames, masks;
    for (int t = 0; t < j; ++t) {
        frames.push_back(u8_frame_to_tensor(buffer_frames_[base + static_cast<size_t>(t)], h_, w_));
        masks.push_back(u8_mask_to_tensor(buffer_masks_[base + static_cast<size_t>(t)], h_, w_));
    }
    auto preds = net_->forward_seq(frames, masks, true);
    const auto& lut = pixel_rain_lut();
    Var<float> loss;
    for (int t = 0; t < k; ++t) {
        const auto& fr = buffer_frames_[base + static_cast<size_t>(j + t)];
        const auto& mk = buffer_masks_[base + static_cast<size_t>(j + t)];
        TensorT<float> truth({1, h_, w_});
        TensorT<float> weights({1, h_, w_});
        for (int64_t i = 0; i < truth.numel(); ++i) {
            truth[i] = static_cast<float>(fr[static_cast<size_t>(i)]) / 255.0f;
            if (!mk[static_cast<size_t>(i)]) {
                weights[i] = 0.0f;
            } else if (balanced_) {
                weights[i] = static_cast<float>(rain_weight(lut[fr[static_cast<size_t>(i)]]));
            } else {
                weights[i] = 1.0f;
            }
        }
        Var<float> l = training_loss(preds[static_cast<size_t>(t)], truth, weights,
                                     static_cast<int64_t>(k));
        loss = loss ? add(loss, l) : l;
    }
    zero_grads(opt_->params());
    backward(loss);
    opt_->step();
    ++updates_;
}

std::vector<std::vector<uint8_t>> DeepModel::predict(int k) {
    const int j = net_->config().input_length;
    if (static_cast<int>(buffer_frames_.size()) < j)
        throw std::logic_error("DeepModel::predict before enough frames were stored");
    if (k != net_->config().horizon)
        throw std::invalid_argument("requested horizon differs from the network configuration");
    const size_t base = buffer_frames_.size() - static_cast<size_t>(j);
    std::vector<TensorT<float>> frames, masks;
    for (int t = 0; t < j; ++t) {
        frames.push_back(u8_frame_to_tensor(buffer_frames_[base + static_cast<size_t>(t)], h_, w_));
        masks.push_back(u8_mask_to_tensor(buffer_masks_[base + static_cast<size_t>(t)], h_, w_));
    }
    auto preds = net_->predict(frames, masks);
    std::vector<std::vector<uint8_t>> out;
    out.reserve(preds.size());
    for (const auto& p : preds) {
        std::vector<uint8_t> f(static_cast<size_t>(p.numel()));
        for (int64_t i = 0; i < p.numel(); ++i)
            f[static_cast<size_t>(i)] = static_cast<uint8_t>(std::lround(
                std::min(1.0f, std::max(0.0f, p[i])) * 255.0f));
        out.push_back(std::move(f));
    }
    return out;
}

// --- protocol loop -----------------------------------------------------------------

RunReport run_protocol(ForecastModel& model, const ProtocolStream& stream, ProtocolMode mode,
                       const std::string& save_dir) {
    const auto t0 = std::chrono::steady_clock::now();
    StreamEnv env(stream);
    std::vector<std::vector<std::vector<uint8_t>>> all_preds;
    while (!env.done()) {
        const SequenceSample& seg = env.next();
        model.store(seg);
        if (mode == ProtocolMode::Online) model.update();
        auto preds = model.predict(stream.k);
        if (!save_dir.empty()) all_preds.push_back(preds);
        env.upload(preds);
    }
    RunReport rep;
    rep.model_id = model.id();
    rep.mode = mode == ProtocolMode::Online ? "online" : "offline";
    rep.j = stream.j;
    rep.k = stream.k;
    rep.rows = env.rows();
    rep.aggregate = aggregate_scores(rep.rows, stream.k);
    rep.wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (!save_dir.empty()) {
        std::filesystem::create_directories(save_dir);
        rep.save(save_dir);
        // raw predictions in the tensor format so scores can be re-derived
        std::vector<std::pair<std::string, TensorT<float>>> owned;
        const int h = stream.segments->h, w = stream.segments->w;
        for (size_t s = 0; s < all_preds.size(); ++s)
            for (size_t t = 0; t < all_preds[s].size(); ++t) {
                TensorT<float> f({1, h, w});
                for (int64_t i = 0; i < f.numel(); ++i)
                    f[i] = static_cast<float>(all_preds[s][t][static_cast<size_t>(i)]) / 255.0f;
                owned.emplace_back("seg" + std::to_string(s) + ".lead" + std::to_string(t),
                                   std::move(f));
            }
        std::vector<std::pair<std::string, const TensorT<float>*>> entries;
        for (auto& [name, t] : owned) entries.emplace_back(name, &t);
        save_manifest(save_dir + "/predictions.nwm", entries);
    }
    return rep;
}

void RunReport::save(const std::string& dir) const {
    std::filesystem::create_directories(dir);
    {
        std::ofstream os(dir + "/aggregate.csv");
        os << "model,mode,seed,n_frames,wall_seconds," << SkillReport::csv_header() << "\n";
        os << model_id << "," << mode << "," << seed << "," << aggregate.n_frames << ","
           << wall_seconds << "," << aggregate.csv_row() << "\n";
    }
    std::ofstream os(dir + "/sequences.csv");
    os << "segment,lead";
    for (double t : kRainThresholds)
        os << ",tp_" << t << ",fn_" << t << ",fp_" << t << ",tn_" << t;
    os << ",wse,wae,se,ae\n";
    for (const auto& row : rows)
        for (size_t lead = 0; lead < row.counts.size(); ++lead) {
            os << row.segment_index << "," << lead;
            for (size_t th = 0; th < kRainThresholds.size(); ++th) {
                const auto& c = row.counts[lead][th];
                os << "," << c.tp << "," << c.fn << "," << c.fp << "," << c.tn;
            }
            os << "," << row.wse[lead] << "," << row.wae[lead] << "," << row.se[lead] << ","
               << row.ae[lead] << "\n";
        }
}

namespace {

std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> out;
    std::string cur;
    for (char c : line) {
        if (c == ',') {
            out.push_back(cur);
            cur.clear();
        } else {
            cur.push_back(c);
        }
    }
    out.push_back(cur);
    return out;
}

} // namespace

RunReport RunReport::load(const std::string& dir) {
    RunReport rep;
    {
        std::ifstream is(dir + "/aggregate.csv");
        if (!is) throw std::runtime_error("cannot open " + dir + "/aggregate.csv");
        std::string header, line;
        std::getline(is, header);
        std::getline(is, line);
        const auto f = split_csv_line(line);
        rep.model_id = f.at(0);
        rep.mode = f.at(1);
        rep.seed = std::stoull(f.at(2));
    }
    std::ifstream is(dir + "/sequences.csv");
    if (!is) throw std::runtime_error("cannot open " + dir + "/sequences.csv");
    std::string line;
    std::getline(is, line); // header
    const size_t nthr = kRainThresholds.size();
    SequenceScore* cur = nullptr;
    int max_lead = -1;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        const auto f = split_csv_line(line);
        const int seg = std::stoi(f.at(0));
        const int lead = std::stoi(f.at(1));
        max_lead = std::max(max_lead, lead);
        if (!cur || cur->segment_index != seg) {
            rep.rows.emplace_back();
            cur = &rep.rows.back();
            cur->segment_index = seg;
        }
        if (static_cast<int>(cur->counts.size()) <= lead) {
            cur->counts.resize(static_cast<size_t>(lead) + 1);
            cur->wse.resize(static_cast<size_t>(lead) + 1);
            cur->wae.resize(static_cast<size_t>(lead) + 1);
            cur->se.resize(static_cast<size_t>(lead) + 1);
            cur->ae.resize(static_cast<size_t>(lead) + 1);
        }
        size_t col = 2;
        for (size_t th = 0; th < nthr; ++th) {
            auto& c = cur->counts[static_cast<size_t>(lead)][th];
            c.tp = std::stoll(f.at(col++));
            c.fn = std::stoll(f.at(col++));
            c.fp = std::stoll(f.at(col++));
            c.tn = std::stoll(f.at(col++));
        }
        cur->wse[static_cast<size_t>(lead)] = std::stod(f.at(col++));
        cur->wae[static_cast<size_t>(lead)] = std::stod(f.at(col++));
        cur->se[static_cast<size_t>(lead)] = std::stod(f.at(col++));
        cur->ae[static_cast<size_t>(lead)] = std::stod(f.at(col++));
    }
    rep.k = max_lead + 1;
    rep.aggregate = aggregate_scores(rep.rows, rep.k);
    return rep;
}

// --- offline trainer ------------------------------------------------------------------

namespace {

double validation_score(Network<float>& net, const Dataset& val) {
    const int j = net.config().input_length;
    const int k = net.config().horizon;
    const auto& lut = pixel_rain_lut();
    double wse = 0, wae = 0;
    int64_t frames_scored = 0;
    for (const auto& rec : val.records) {
        std::vector<TensorT<float>> frames, masks;
        for (int t = 0; t < j; ++t) {
            frames.push_back(u8_frame_to_tensor(
                std::vector<uint8_t>(rec.frame(t), rec.frame(t) + rec.frame_size()), rec.h, rec.w));
            masks.push_back(u8_mask_to_tensor(
                std::vector<uint8_t>(rec.frame_mask(t), rec.frame_mask(t) + rec.frame_size()),
                rec.h, rec.w));
        }
        auto preds = net.predict(frames, masks);
        for (int t = 0; t < k; ++t) {
            const uint8_t* truth = rec.frame(j + t);
            const uint8_t* mk = rec.frame_mask(j + t);
            const auto& p = preds[static_cast<size_t>(t)];
            for (int64_t i = 0; i < p.numel(); ++i) {
                if (!mk[i]) continue;
                const double tr = lut[truth[i]];
                const double pr =
                    lut[static_cast<uint8_t>(std::lround(std::min(1.0f, std::max(0.0f, p[i])) * 255.0f))];
                const double w = rain_weight(tr);
                const double err = pr - tr;
                wse += w * err * err;
                wae += w * std::abs(err);
            }
        }
        frames_scored += k;
    }
    return (wse + wae) / static_cast<double>(std::max<int64_t>(1, frames_scored));
}

} // namespace

TrainResult train_offline(Network<float>& net, const Dataset& train, const Dataset* val,
                          const TrainSchedule& schedule, const std::string& checkpoint_path) {
    const int j = net.config().input_length;
    const int k = net.config().horizon;
    if (train.seq_len < j + k)
        throw std::invalid_argument("training records are shorter than J+K frames");
    if (train.records.empty()) throw std::invalid_argument("training dataset is empty");

    std::vector<Var<float>> params;
    for (auto& [name, p] : net.parameters()) params.push_back(p);
    Adam<float> opt(params, static_cast<float>(schedule.lr),
                    static_cast<float>(schedule.adam_beta1));
    Rng rng(schedule.seed);
    const auto& lut = pixel_rain_lut();
    const int h = train.h, w = train.w;
    const int64_t px = static_cast<int64_t>(h) * w;

    TrainResult result;
    double best_val = std::numeric_limits<double>::infinity();
    int best_iter = -1;
    int rounds_without_improvement = 0;
    std::vector<std::pair<std::string, TensorT<float>>> best_params;

    auto snapshot = [&]() {
        best_params.clear();
        for (auto& [name, p] : net.parameters()) best_params.emplace_back(name, p->value);
    };
    auto restore_best = [&]() {
        if (best_params.empty()) return;
        auto current = net.parameters();
        for (size_t i = 0; i < current.size(); ++i) current[i].second->value = best_params[i].second;
    };

    for (int iter = 0; iter < schedule.iterations; ++iter) {
        // assemble the batch
        std::vector<TensorT<float>> frames(static_cast<size_t>(j)),
            masks(static_cast<size_t>(j));
        for (int t = 0; t < j; ++t) {
            frames[static_cast<size_t>(t)] = TensorT<float>({schedule.batch, 1, h, w});
            masks[static_cast<size_t>(t)] = TensorT<float>({schedule.batch, 1, h, w});
        }
        std::vector<TensorT<float>> truth(static_cast<size_t>(k)), weights(static_cast<size_t>(k));
        for (int t = 0; t < k; ++t) {
            truth[static_cast<size_t>(t)] = TensorT<float>({schedule.batch, 1, h, w});
            weights[static_cast<size_t>(t)] = TensorT<float>({schedule.batch, 1, h, w});
        }
        for (int b = 0; b < schedule.batch; ++b) {
            const auto& rec = train.records[rng.uniform_index(train.records.size())];
            for (int t = 0; t < j; ++t) {
                const uint8_t* f = rec.frame(t);
                const uint8_t* m = rec.frame_mask(t);
                float* fd = frames[static_cast<size_t>(t)].data() + static_cast<int64_t>(b) * px;
                float* md = masks[static_cast<size_t>(t)].data() + static_cast<int64_t>(b) * px;
                for (int64_t i = 0; i < px; ++i) {
                    fd[i] = static_cast<float>(f[i]) / 255.0f;
                    md[i] = m[i] ? 1.0f : 0.0f;
                }
            }
            for (int t = 0; t < k; ++t) {
                const uint8_t* f = rec.frame(j + t);
                const uint8_t* m = rec.frame_mask(j + t);
                float* td = truth[static_cast<size_t>(t)].data() + static_cast<int64_t>(b) * px;
                float* wd = weights[static_cast<size_t>(t)].data() + static_cast<int64_t>(b) * px;
                for (int64_t i = 0; i < px; ++i) {
                    td[i] = static_cast<float>(f[i]) / 255.0f;
                    if (!m[i]) wd[i] = 0.0f;
                    else if (schedule.balanced) wd[i] = static_cast<float>(rain_weight(lut[f[i]]));
                    else wd[i] = 1.0f;
                }
            }
        }

        auto preds = net.forward_seq(frames, masks, true);
        Var<float> loss;
        const int64_t norm = static_cast<int64_t>(schedule.batch) * k;
        for (int t = 0; t < k; ++t) {
            Var<float> l = training_loss(preds[static_cast<size_t>(t)], truth[static_cast<size_t>(t)],
                                         weights[static_cast<size_t>(t)], norm);
            loss = loss ? add(loss, l) : l;
        }
        const double loss_value = static_cast<double>(loss->value[0]);
        if (!std::isfinite(loss_value)) {
            result.diverged = true;
            result.diverged_at = iter;
            break;
        }
        zero_grads(params);
        backward(loss);
        clip_global_norm_params(params, static_cast<float>(schedule.clip));
        opt.step();

        double val_score = std::numeric_limits<double>::quiet_NaN();
        const bool do_val = val && schedule.validate_every > 0 &&
                            ((iter + 1) % schedule.validate_every == 0 ||
                             iter + 1 == schedule.iterations);
        if (do_val) {
            val_score = validation_score(net, *val);
            if (val_score < best_val) {
                best_val = val_score;
                best_iter = iter + 1;
                rounds_without_improvement = 0;
                snapshot();
            } else {
                ++rounds_without_improvement;
            }
        }
        if ((iter + 1) % std::max(1, schedule.log_every) == 0 || do_val)
            result.curve.push_back({static_cast<double>(iter + 1), loss_value, val_score});
        if (val && rounds_without_improvement >= schedule.patience_rounds) break;
    }

    restore_best();
    result.best_val = best_val;
    result.best_iter = best_iter;
    if (!checkpoint_path.empty()) net.save_checkpoint(checkpoint_path);
    return result;
}

double evaluate_frame_mse(Network<float>& net, const Dataset& test) {
    const int j = net.config().input_length;
    const int k = net.config().horizon;
    if (test.seq_len < j + k) throw std::invalid_argument("test records are shorter than J+K");
    double se = 0;
    int64_t count = 0;
    for (const auto& rec : test.records) {
        std::vector<TensorT<float>> frames, masks;
        for (int t = 0; t < j; ++t) {
            frames.push_back(u8_frame_to_tensor(
                std::vector<uint8_t>(rec.frame(t), rec.frame(t) + rec.frame_size()), rec.h, rec.w));
            masks.push_back(u8_mask_to_tensor(
                std::vector<uint8_t>(rec.frame_mask(t), rec.frame_mask(t) + rec.frame_size()),
                rec.h, rec.w));
        }
        auto preds = net.predict(frames, masks);
        for (int t = 0; t < k; ++t) {
            const uint8_t* truth = rec.frame(j + t);
            const auto& p = preds[static_cast<size_t>(t)];
            for (int64_t i = 0; i < p.numel(); ++i) {
                const double d = static_cast<double>(p[i]) - static_cast<double>(truth[i]) / 255.0;
                se += d * d;
            }
            count += p.numel();
        }
    }
    return se / static_cast<double>(count);
}

// --- report generation ---------------------------------------------------------------

namespace {

// minimal PPM polyline plot
void write_curve_plot(const std::string& path, const std::vector<std::vector<double>>& series) {
    const int w = 640, h = 400;
    std::vector<std::array<uint8_t, 3>> img(static_cast<size_t>(w) * h, {255, 255, 255});
    double lo = 1e300, hi = -1e300;
    size_t len = 0;
    for (const auto& s : series)
        for (double v : s) {
            lo = std::min(lo, v);
            hi = std::max(hi, v);
        }
    for (const auto& s : series) len = std::max(len, s.size());
    if (len < 2 || hi <= lo) {
        hi = lo + 1;
    }
    const std::array<std::array<uint8_t, 3>, 6> palette{{{200, 30, 30},
                                                         {30, 100, 200},
                                                         {30, 160, 60},
                                                         {200, 140, 20},
                                                         {140, 40, 160},
                                                         {20, 20, 20}}};
    auto put = [&](int x, int y, const std::array<uint8_t, 3>& c) {
        if (x >= 0 && x < w && y >= 0 && y < h) img[static_cast<size_t>(y) * w + x] = c;
    };
    for (int x = 0; x < w; ++x) put(x, h - 20, {120, 120, 120});
    for (int y = 0; y < h; ++y) put(30, y, {120, 120, 120});
    for (size_t si = 0; si < series.size(); ++si) {
        const auto& s = series[si];
        const auto& c = palette[si % palette.size()];
        for (size_t i = 1; i < s.size(); ++i) {
            const double x0 = 30 + (w - 50.0) * (i - 1) / std::max<size_t>(1, len - 1);
            const double x1 = 30 + (w - 50.0) * i / std::max<size_t>(1, len - 1);
            const double y0 = (h - 20) - (h - 40.0) * (s[i - 1] - lo) / (hi - lo);
            const double y1 = (h - 20) - (h - 40.0) * (s[i] - lo) / (hi - lo);
            const int steps = 64;
            for (int t = 0; t <= steps; ++t) {
                const double a = static_cast<double>(t) / steps;
                put(static_cast<int>(std::lround(x0 + a * (x1 - x0))),
                    static_cast<int>(std::lround(y0 + a * (y1 - y0))), c);
            }
        }
    }
    std::ofstream os(path, std::ios::binary);
    os << "P6\n" << w << " " << h << "\n255\n";
    for (const auto& px : img) os.write(reinterpret_cast<const char*>(px.data()), 3);
}

} // namespace

void report_emit(const std::vector<RunReport>& reports, const std::string& out_dir) {
    if (reports.empty()) throw std::invalid_argument("report_emit needs at least one report");
    for (const auto& r : reports)
        if (r.aggregate.thresholds != reports[0].aggregate.thresholds)
            throw std::invalid_argument("report_emit: inconsistent threshold sets across reports");
    std::filesystem::create_directories(out_dir);

    const size_t nthr = kRainThresholds.size();
    const size_t ncols = 2 * nthr + 2; // csi..., hss..., bmse, bmae
    auto column_value = [&](const RunReport& r, size_t col) {
        if (col < nthr) return r.aggregate.csi[col];
        if (col < 2 * nthr) return r.aggregate.hss[col - nthr];
        return col == 2 * nthr ? r.aggregate.bmse : r.aggregate.bmae;
    };
    auto higher_better = [&](size_t col) { return col < 2 * nthr; };

    // best / second-best flags per column
    std::vector<std::vector<char>> flags(reports.size(), std::vector<char>(ncols, ' '));
    if (reports.size() > 1) {
        for (size_t col = 0; col < ncols; ++col) {
            std::vector<size_t> order(reports.size());
            std::iota(order.begin(), order.end(), 0);
            std::sort(order.begin(), order.end(), [&](size_t a, size_t b) {
                const double va = column_value(reports[a], col);
                const double vb = column_value(reports[b], col);
                return higher_better(col) ? va > vb : va < vb;
            });
            flags[order[0]][col] = 'b';
            flags[order[1]][col] = 's';
        }
    }

    {
        std::ofstream os(out_dir + "/skill_table.csv");
        os << "model,mode," << SkillReport::csv_header() << "\n";
        for (const auto& r : reports)
            os << r.model_id << "," << r.mode << "," << r.aggregate.csv_row() << "\n";
    }
    {
        std::ofstream os(out_dir + "/skill_flags.csv");
        os << "model,mode";
        for (double t : kRainThresholds) os << ",csi_" << t;
        for (double t : kRainThresholds) os << ",hss_" << t;
        os << ",bmse,bmae\n";
        for (size_t i = 0; i < reports.size(); ++i) {
            os << reports[i].model_id << "," << reports[i].mode;
            for (size_t col = 0; col < ncols; ++col) os << "," << flags[i][col];
            os << "\n";
        }
    }

    // Kendall tau between error metrics and skill scores over the model pool
    if (reports.size() >= 2) {
        std::vector<std::vector<double>> err(4), skill(2 * nthr);
        for (const auto& r : reports) {
            err[0].push_back(r.aggregate.mse);
            err[1].push_back(r.aggregate.mae);
            err[2].push_back(r.aggregate.bmse);
            err[3].push_back(r.aggregate.bmae);
            for (size_t th = 0; th < nthr; ++th) {
                skill[th].push_back(r.aggregate.csi[th]);
                skill[nthr + th].push_back(r.aggregate.hss[th]);
            }
        }
        std::ofstream os(out_dir + "/kendall_tau.csv");
        os << "metric";
        for (double t : kRainThresholds) os << ",csi_" << t;
        for (double t : kRainThresholds) os << ",hss_" << t;
        os << "\n";
        const char* names[4] = {"mse", "mae", "bmse", "bmae"};
        for (size_t e = 0; e < 4; ++e) {
            os << names[e];
            for (size_t s = 0; s < 2 * nthr; ++s) os << "," << kendall_tau(err[e], skill[s]);
            os << "\n";
        }
    }

    // per-lead-time error curves
    {
        std::ofstream os(out_dir + "/lead_curves.csv");
        os << "model,mode,lead,bmse,mse\n";
        std::vector<std::vector<double>> series;
        for (const auto& r : reports) {
            std::vector<double> curve;
            for (int lead = 0; lead < r.k; ++lead) {
                double wse = 0, se = 0;
                for (const auto& row : r.rows) {
                    wse += row.wse[static_cast<size_t>(lead)];
                    se += row.se[static_cast<size_t>(lead)];
                }
                const double n = std::max<double>(1.0, static_cast<double>(r.rows.size()));
                os << r.model_id << "," << r.mode << "," << lead << "," << wse / n << ","
                   << se / n << "\n";
                curve.push_back(wse / n);
            }
            series.push_back(std::move(curve));
        }
        write_curve_plot(out_dir + "/lead_bmse.ppm", series);
    }
}

} // namespace nwlab
