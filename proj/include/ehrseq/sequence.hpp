#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "ehrseq/tokenizer.hpp"

namespace ehrseq {

enum class PackMode { cross, isolated };

struct SepSlot {
    int seq_index = 0;          // index of the sep token within the sequence
    int span = 0;               // patient span the sep belongs to
    // chunk-local index of the predicted visit; add the span's first_visit
    // for the trajectory-level index
    int target_visit_index = 0;
};

struct PatientSpan {
    int begin = 0;  // [begin, end) in the packed sequence
    int end = 0;
    int traj_index = -1;   // source trajectory
    int first_visit = 0;   // trajectory visit index the chunk starts at
};

// Event tokens of visit i sit at position t_i; the sep closing visit i sits
// at position t_{i+1} (it predicts visit i+1) while belonging to visit i for
// masking. No sep after the final visit.
struct PositionedSequence {
    std::vector<TokenId> token_ids;
    std::vector<double> positions;    // days
    std::vector<int> visit_index;     // chunk-local visit of each token; -1 for pad
    std::vector<SepSlot> sep_slots;
    std::vector<PatientSpan> patient_spans;

    int length() const { return int(token_ids.size()); }
};

// Per-sep multi-hot target and repeat-decay weights, stored sparse over the
// positive ids; absent ids have target 0 and weight 1.
struct TargetBlock {
    int target_visit_index = 0;
    std::vector<TokenId> positive_ids;
    std::vector<double> weights;  // max(delta^count, w_min), aligned with positive_ids
    std::vector<int> repeat_counts;
};

struct AttentionMask {
    int n = 0;
    std::vector<uint8_t> allowed;  // row-major n*n

    bool at(int q, int k) const { return allowed[size_t(q) * size_t(n) + size_t(k)] != 0; }
    void set(int q, int k, bool v) { allowed[size_t(q) * size_t(n) + size_t(k)] = v ? 1 : 0; }
};

struct PackedBatch {
    PositionedSequence seq;                // length block_size, pad-filled
    std::vector<TargetBlock> targets;      // aligned with seq.sep_slots
};

struct PackStats {
    int64_t truncated_visits = 0;    // single visit exceeded block_size - 1
    int64_t dropped_single_visit_chunks = 0;
};

PositionedSequence assign_positions(const TokenizedTrajectory& traj);

// weight = max(delta^c, w_min) where c counts prior visits containing the
// token; negatives implicitly weigh 1.
std::vector<TargetBlock> build_targets_and_weights(const TokenizedTrajectory& traj, double delta,
                                                   double w_min);

// Greedy first-fit packing at whole-chunk granularity; long trajectories are
// split at visit boundaries with no overlap, chunk times rebased to the
// chunk's first visit. A chunk whose last visit has a successor keeps its
// trailing sep (the target visit's events are not part of the input), so no
// visit transition loses its training target.
std::vector<PackedBatch> pack_sequences(const std::vector<TokenizedTrajectory>& trajs,
                                        int block_size, PackMode mode, double delta, double w_min,
                                        PackStats* stats = nullptr);

// Unpacked per-trajectory sequences under the same chunking rules as
// pack_sequences (no padding); used by the evaluation paths.
std::vector<PositionedSequence> trajectory_sequences(const TokenizedTrajectory& traj,
                                                     int traj_index, int block_size,
                                                     PackStats* stats = nullptr);

// allowed[q][k] iff visit(k) <= visit(q) within a span; cross mode also
// allows attention to every token of earlier spans; pad excluded both ways.
AttentionMask build_attention_mask(const PositionedSequence& seq, PackMode mode);

// 0/1 grid, one row per line, for golden-file tests.
std::string mask_to_grid(const AttentionMask& mask);

}  // namespace ehrseq
