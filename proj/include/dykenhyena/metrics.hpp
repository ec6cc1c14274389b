// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "dykenhyena/errors.hpp"

namespace dkh {

using Confusion = std::vector<std::vector<long long>>;  // [true][predicted]

struct ClassScores {
    double precision = 0.0, recall = 0.0, f1 = 0.0;
    long long support = 0;
};

struct MetricsReport {
    Confusion confusion;
    std::vector<ClassScores> per_class;  // from the full confusion matrix
    double acc = 0.0;
    double macro_f1 = 0.0;
    double macro_precision = 0.0;
    double macro_recall = 0.0;
    double weighted_f1 = 0.0;
    double weighted_precision = 0.0;
    double weighted_recall = 0.0;
    bool has_oos = false;
    double oid_acc = 0.0;
    double f1_is = 0.0;
    double f1_oos = 0.0;
    double oid_f1 = 0.0;
};

namespace detail {
inline double f1_of(double p, double r) { return (p + r) > 0.0 ? 2.0 * p * r / (p + r) : 0.0; }

// Scores for the classes in [0, n_cls) restricted to true rows in [0, n_rows).
inline std::vector<ClassScores> class_scores(const Confusion& m, std::size_t n_rows, std::size_t n_cls) {
    std::vector<ClassScores> out(n_cls);
    for (std::size_t k = 0; k < n_cls; ++k) {
        long long pred = 0, sup = 0;
        for (std::size_t r = 0; r < n_rows; ++r) pred += m[r][k];
        if (k < n_rows)
            for (long long v : m[k]) sup += v;
        const long long tp = k < n_rows ? m[k][k] : 0;
        ClassScores& s = out[k];
        s.support = sup;
        s.precision = pred ? static_cast<double>(tp) / static_cast<double>(pred) : 0.0;
        s.recall = sup ? static_cast<double>(tp) / static_cast<double>(sup) : 0.0;
        s.f1 = f1_of(s.precision, s.recall);
    }
    return out;
}
}  // namespace detail

/// Scores derived from a confusion matrix.
///
/// Without OOS every score uses the whole matrix. With an OOS class (it must be
/// the last index) the closed-set scores (acc, F1, precision, recall and their
/// weighted forms) use the in-scope rows only, so in-scope samples predicted as
/// OOS count as errors; oid_acc and oid_f1 use all K+1 classes, f1_is is the
/// macro F1 of the K in-scope classes and f1_oos the F1 of the OOS class, both
/// from the full matrix. Zero-support classes contribute 0 to macro means.
inline MetricsReport metrics_from_confusion(const Confusion& m, std::optional<std::size_t> oos_index = {}) {
    const std::size_t n = m.size();
    for (const auto& row : m)
        if (row.size() != n) throw ShapeMismatch("confusion matrix must be square");
    if (n == 0) throw EmptyDataset("empty confusion matrix");
    if (oos_index && *oos_index != n - 1) throw Error("the OOS class must be the last index");

    MetricsReport r;
    r.confusion = m;
    r.has_oos = oos_index.has_value();
    r.per_class = detail::class_scores(m, n, n);

    const std::size_t k_in = r.has_oos ? n - 1 : n;
    long long total = 0, correct = 0;
    for (std::size_t i = 0; i < k_in; ++i)
        for (std::size_t j = 0; j < n; ++j) {
            total += m[i][j];
            if (i == j) correct += m[i][j];
        }
    if (total == 0) throw EmptyDataset("no in-scope samples in confusion matrix");
    const auto closed = detail::class_scores(m, k_in, k_in);
    r.acc = static_cast<double>(correct) / static_cast<double>(total);
    for (const auto& s : closed) {
        r.macro_f1 += s.f1;
        r.macro_precision += s.precision;
        r.macro_recall += s.recall;
        const double w = static_cast<double>(s.support) / static_cast<double>(total);
        r.weighted_f1 += w * s.f1;
        r.weighted_precision += w * s.precision;
        r.weighted_recall += w * s.recall;
    }
    r.macro_f1 /= static_cast<double>(k_in);
    r.macro_precision /= static_cast<double>(k_in);
    r.macro_recall /= static_cast<double>(k_in);

    if (r.has_oos) {
        long long all = 0, diag = 0;
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < n; ++j) {
                all += m[i][j];
                if (i == j) diag += m[i][j];
            }
        r.oid_acc = static_cast<double>(diag) / static_cast<double>(all);
        for (std::size_t k = 0; k < k_in; ++k) r.f1_is += r.per_class[k].f1;
        r.f1_is /= static_cast<double>(k_in);
        r.f1_oos = r.per_class[n - 1].f1;
        for (const auto& s : r.per_class) r.oid_f1 += s.f1;
        r.oid_f1 /= static_cast<double>(n);
    }
    return r;
}

/// Index of the largest value; ties go to the lowest index.
inline std::size_t argmax(std::span<const double> row) {
    std::size_t best = 0;
    for (std::size_t j = 1; j < row.size(); ++j)
        if (row[j] > row[best]) best = j;
    return best;
}

}  // namespace dkh
