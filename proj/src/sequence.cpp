#include "ehrseq/sequence.hpp"

#include <algorithm>
#include <map>

#include "ehrseq/loss_opt.hpp"

namespace ehrseq {

PositionedSequence assign_positions(const TokenizedTrajectory& traj) {
    const int n = int(traj.visits.size());
    if (n < 2) throw DataError("assign_positions: trajectory needs >= 2 visits: " + traj.patient_id);

    PositionedSequence seq;
    for (int i = 0; i < n; ++i) {
        const auto& visit = traj.visits[i];
        for (TokenId id : visit.token_ids) {
            seq.token_ids.push_back(id);
            seq.positions.push_back(double(visit.time_days));
            seq.visit_index.push_back(i);
        }
        if (i + 1 < n) {
            SepSlot slot;
            slot.seq_index = int(seq.token_ids.size());
            slot.span = 0;
            slot.target_visit_index = i + 1;
            seq.sep_slots.push_back(slot);
            seq.token_ids.push_back(kSepId);
            seq.positions.push_back(double(traj.visits[i + 1].time_days));
            seq.visit_index.push_back(i);  // sep belongs to the visit it terminates
        }
    }
    seq.patient_spans.push_back({0, seq.length(), 0, 0});
    return seq;
}

std::vector<TargetBlock> build_targets_and_weights(const TokenizedTrajectory& traj, double delta,
                                                   double w_min) {
    if (!(delta > 0.0 && delta <= 1.0)) throw ConfigError("targets: delta must be in (0,1]");
    if (!(w_min >= 0.0 && w_min < 1.0)) throw ConfigError("targets: w_min must be in [0,1)");

    const int n = int(traj.visits.size());
    std::vector<TargetBlock> blocks;
    blocks.reserve(size_t(std::max(0, n - 1)));

    // incremental count of visits containing each token, over visits 0..i
    std::map<TokenId, int> history_counts;
    for (int i = 0; i + 1 < n; ++i) {
        for (TokenId id : traj.visits[i].token_ids) ++history_counts[id];

        TargetBlock block;
        block.target_visit_index = i + 1;
        for (TokenId id : traj.visits[i + 1].token_ids) {
            auto it = history_counts.find(id);
            const int count = it == history_counts.end() ? 0 : it->second;
            block.positive_ids.push_back(id);
            block.repeat_counts.push_back(count);
            block.weights.push_back(repeat_weight(count, delta, w_min));
        }
        blocks.push_back(std::move(block));
    }
    return blocks;
}

namespace {

struct Chunk {
    int traj_index = 0;
    int first_visit = 0;   // inclusive
    int last_visit = 0;    // inclusive
    int token_length = 0;  // events + seps (internal plus trailing)
    bool trailing_sep = false;
};

// Sequence length of visits [a..b]: events, one sep between consecutive
// visits, and a trailing sep when visit b has a successor (the chunk then
// predicts the successor without holding its events).
std::vector<Chunk> chunk_trajectory(const TokenizedTrajectory& traj, int traj_index, int block_size,
                                    std::vector<int>* visit_lengths, PackStats* stats) {
    const int n = int(traj.visits.size());
    visit_lengths->resize(size_t(n));
    for (int i = 0; i < n; ++i) {
        int len = int(traj.visits[i].token_ids.size());
        if (len > block_size - 1) {
            len = block_size - 1;
            if (stats) ++stats->truncated_visits;
        }
        (*visit_lengths)[size_t(i)] = len;
    }

    auto length_of = [&](int a, int b) {
        int len = b - a;  // internal seps
        for (int i = a; i <= b; ++i) len += (*visit_lengths)[size_t(i)];
        if (b + 1 < n) len += 1;  // trailing sep predicting visit b+1
        return len;
    };

    std::vector<Chunk> chunks;
    int start = 0;
    while (start < n) {
        int end = start;
        while (end + 1 < n && length_of(start, end + 1) <= block_size) ++end;
        if (start == end && end == n - 1) {
            // the final visit alone has nothing left to predict
            if (stats) ++stats->dropped_single_visit_chunks;
        } else {
            chunks.push_back(
                {traj_index, start, end, length_of(start, end), end + 1 < n});
        }
        start = end + 1;
    }
    return chunks;
}

}  // namespace

std::vector<PackedBatch> pack_sequences(const std::vector<TokenizedTrajectory>& trajs,
                                        int block_size, PackMode mode, double delta, double w_min,
                                        PackStats* stats) {
    (void)mode;  // packing is mode-independent; the mask builder consumes it
    if (block_size < 2) throw ConfigError("pack: block_size must be >= 2");

    std::vector<std::vector<int>> visit_lengths(trajs.size());
    std::vector<Chunk> chunks;
    for (size_t t = 0; t < trajs.size(); ++t) {
        auto traj_chunks =
            chunk_trajectory(trajs[t], int(t), block_size, &visit_lengths[t], stats);
        chunks.insert(chunks.end(), traj_chunks.begin(), traj_chunks.end());
    }

    // per-trajectory global visit counts for repeat weights across chunk
    // boundaries: history is the full patient record, not the chunk window
    std::vector<std::vector<TargetBlock>> all_targets(trajs.size());
    for (size_t t = 0; t < trajs.size(); ++t)
        all_targets[t] = build_targets_and_weights(trajs[t], delta, w_min);

    std::vector<PackedBatch> rows;
    std::vector<int> row_used;

    for (const auto& chunk : chunks) {
        int row_idx = -1;
        for (size_t r = 0; r < rows.size(); ++r) {
            if (row_used[r] + chunk.token_length <= block_size) {
                row_idx = int(r);
                break;
            }
        }
        if (row_idx < 0) {
            rows.emplace_back();
            auto& seq = rows.back().seq;
            seq.token_ids.assign(size_t(block_size), kPadId);
            seq.positions.assign(size_t(block_size), 0.0);
            seq.visit_index.assign(size_t(block_size), -1);
            row_used.push_back(0);
            row_idx = int(rows.size()) - 1;
        }

        auto& row = rows[size_t(row_idx)];
        auto& seq = row.seq;
        const auto& traj = trajs[size_t(chunk.traj_index)];
        const auto& lengths = visit_lengths[size_t(chunk.traj_index)];
        const int span_id = int(seq.patient_spans.size());
        const int begin = row_used[size_t(row_idx)];
        const int64_t t_base = traj.visits[size_t(chunk.first_visit)].time_days;

        int cursor = begin;
        for (int v = chunk.first_visit; v <= chunk.last_visit; ++v) {
            const auto& visit = traj.visits[size_t(v)];
            const int chunk_visit = v - chunk.first_visit;
            for (int e = 0; e < lengths[size_t(v)]; ++e) {
                seq.token_ids[size_t(cursor)] = visit.token_ids[size_t(e)];
                seq.positions[size_t(cursor)] = double(visit.time_days - t_base);
                seq.visit_index[size_t(cursor)] = chunk_visit;
                ++cursor;
            }
            if (v < chunk.last_visit || chunk.trailing_sep) {
                SepSlot slot;
                slot.seq_index = cursor;
                slot.span = span_id;
                slot.target_visit_index = chunk_visit + 1;
                seq.sep_slots.push_back(slot);
                row.targets.push_back(all_targets[size_t(chunk.traj_index)][size_t(v)]);
                seq.token_ids[size_t(cursor)] = kSepId;
                seq.positions[size_t(cursor)] = double(traj.visits[size_t(v + 1)].time_days - t_base);
                seq.visit_index[size_t(cursor)] = chunk_visit;
                ++cursor;
            }
        }
        seq.patient_spans.push_back({begin, cursor, chunk.traj_index, chunk.first_visit});
        row_used[size_t(row_idx)] = cursor;
    }
    return rows;
}

std::vector<PositionedSequence> trajectory_sequences(const TokenizedTrajectory& traj,
                                                     int traj_index, int block_size,
                                                     PackStats* stats) {
    if (block_size < 2) throw ConfigError("trajectory_sequences: block_size must be >= 2");
    std::vector<int> lengths;
    const auto chunks = chunk_trajectory(traj, traj_index, block_size, &lengths, stats);

    std::vector<PositionedSequence> out;
    out.reserve(chunks.size());
    for (const auto& chunk : chunks) {
        PositionedSequence seq;
        const int64_t t_base = traj.visits[size_t(chunk.first_visit)].time_days;
        for (int v = chunk.first_visit; v <= chunk.last_visit; ++v) {
            const auto& visit = traj.visits[size_t(v)];
            const int chunk_visit = v - chunk.first_visit;
            for (int e = 0; e < lengths[size_t(v)]; ++e) {
                seq.token_ids.push_back(visit.token_ids[size_t(e)]);
                seq.positions.push_back(double(visit.time_days - t_base));
                seq.visit_index.push_back(chunk_visit);
            }
            if (v < chunk.last_visit || chunk.trailing_sep) {
                SepSlot slot;
                slot.seq_index = int(seq.token_ids.size());
                slot.span = 0;
                slot.target_visit_index = chunk_visit + 1;
                seq.sep_slots.push_back(slot);
                seq.token_ids.push_back(kSepId);
                seq.positions.push_back(double(traj.visits[size_t(v + 1)].time_days - t_base));
                seq.visit_index.push_back(chunk_visit);
            }
        }
        seq.patient_spans.push_back({0, seq.length(), chunk.traj_index, chunk.first_visit});
        out.push_back(std::move(seq));
    }
    return out;
}

AttentionMask build_attention_mask(const PositionedSequence& seq, PackMode mode) {
    const int n = seq.length();
    AttentionMask mask;
    mask.n = n;
    mask.allowed.assign(size_t(n) * size_t(n), 0);

    std::vector<int> span_of(size_t(n), -1);
    for (size_t s = 0; s < seq.patient_spans.size(); ++s)
        for (int i = seq.patient_spans[s].begin; i < seq.patient_spans[s].end; ++i)
            span_of[size_t(i)] = int(s);

    for (int q = 0; q < n; ++q) {
        if (seq.visit_index[size_t(q)] < 0) continue;  // pad attends nothing
        for (int k = 0; k < n; ++k) {
            if (seq.visit_index[size_t(k)] < 0) continue;  // pad never attended
            const int sq = span_of[size_t(q)];
            const int sk = span_of[size_t(k)];
            bool ok = false;
            if (sq == sk) {
                ok = seq.visit_index[size_t(k)] <= seq.visit_index[size_t(q)];
            } else if (mode == PackMode::cross) {
                ok = sk < sq;
            }
            if (ok) mask.set(q, k, true);
        }
    }
    return mask;
}

std::string mask_to_grid(const AttentionMask& mask) {
    std::string out;
    out.reserve(size_t(mask.n) * size_t(mask.n + 1));
    for (int q = 0; q < mask.n; ++q) {
        for (int k = 0; k < mask.n; ++k) out.push_back(mask.at(q, k) ? '1' : '0');
        out.push_back('\n');
    }
    return out;
}

}  // namespace ehrseq
