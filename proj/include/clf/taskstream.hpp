#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "clf/rng.hpp"
#include "clf/types.hpp"

namespace clf {

struct LabeledDataset {
    Matrix features;          // [N × d]
    std::vector<int> labels;  // [N]
    std::vector<int> classes; // sorted vocabulary

    std::size_t size() const { return labels.size(); }
    Eigen::Index dim() const { return features.cols(); }
};

enum class DatasetFormat { csv, binary };

DatasetFormat parse_dataset_format(const std::string& s);

/// CSV: one sample per line, integer class id first, then real features.
/// Binary: "CLDS" | u32 version | u64 N | u32 d | u32 classes | u32 labels[N] | f64 features[N*d].
LabeledDataset load_dataset(const std::filesystem::path& path, DatasetFormat format);
void save_dataset_binary(const LabeledDataset& ds, const std::filesystem::path& path);
void save_dataset_csv(const LabeledDataset& ds, const std::filesystem::path& path);

/// Isotropic Gaussian clusters, one per class; used for bundled toy data and tests.
LabeledDataset make_gaussian_clusters(int classes, int per_class, int dim, double spread, double noise,
                                      std::uint64_t seed);

/// Each class is a mixture of `modes` Gaussian sub-clusters with random centers.
LabeledDataset make_cluster_mixture(int classes, int modes, int per_mode, int dim, double spread, double noise,
                                    std::uint64_t seed);

/// `tasks` 2-way tasks living in input dims 0-1 (dims 2-3 are zero), then a
/// `final_classes`-way task whose classes sit on a ring of radius `radius` in
/// dims 2-3 with dims 0-1 reduced to noise. Returns the dataset and its task groups.
struct ShiftSequence {
    LabeledDataset data;
    std::vector<std::vector<int>> groups;
};
ShiftSequence make_shift_sequence(int tasks, int final_classes, int per_class, double radius, std::uint64_t seed);

/// The bundled 10-class toy dataset (data/toy.csv).
LabeledDataset make_toy_dataset();

struct SplitFractions {
    double train = 0.8;
    double val = 0.2;
    double test = 0.0;
};

/// One split of one task. Labels are within-task indices 0..k-1.
struct SplitData {
    Matrix x;
    std::vector<int> y;
    std::vector<std::size_t> source_rows;  // row indices into the source dataset

    std::size_t size() const { return y.size(); }
    SplitData subset(const std::vector<std::size_t>& idx) const;
};

struct TaskData {
    int id = 0;                // identity of the task (position in the unordered stream)
    std::vector<int> classes;  // source class ids; within-task label i maps to classes[i]
    SplitData train, val, test;

    int num_classes() const { return static_cast<int>(classes.size()); }
};

struct TaskStream {
    std::vector<TaskData> tasks;
    std::vector<int> order;  // order[k] = identity of the task trained k-th

    std::size_t size() const { return tasks.size(); }
};

/// Stratified per-class split, labels remapped in group order. Deterministic in `seed`.
TaskStream make_task_stream(const LabeledDataset& ds, const std::vector<std::vector<int>>& groups,
                            const SplitFractions& split, std::uint64_t seed);

/// Groups of `group_size` consecutive class ids from the vocabulary.
std::vector<std::vector<int>> consecutive_groups(const LabeledDataset& ds, int group_size);

/// perm[k] = current position of the task that should train k-th.
TaskStream apply_ordering(const TaskStream& stream, const std::vector<int>& perm);

/// Shuffled index batches of [0, n) for one epoch; the last batch may be short.
std::vector<std::vector<std::size_t>> batches(std::size_t n, std::size_t batch_size, std::uint64_t seed,
                                              std::uint64_t epoch);

}  // namespace clf
