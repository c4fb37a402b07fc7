#pragma once

#include <algorithm>
#include <cstdlib>
#include <exception>
#include <functional>
#include <mutex>
#include <vector>

#ifdef _OPENMP
#include <omp.h>
#endif

#include "rectiflow/common.hpp"

namespace rectiflow {

/// Worker-pool cap. 0 = library default (OMP runtime / RECTIFLOW_THREADS).
void set_thread_count(int n);
int thread_count();

// Reductions are decomposed into fixed-size chunks whose partial sums are
// combined in index order, so results are independent of the thread count.
// The serial reference paths walk the same chunks.
constexpr Index kChunkRows = 1024;

inline Index chunk_count(Index n) { return (n + kChunkRows - 1) / kChunkRows; }

/// Runs body(i) for i in [0, n) across the worker pool. Exceptions thrown by
/// any iteration are captured and the first one rethrown after the loop.
template <typename Body>
void parallel_for(Index n, Body&& body) {
    std::exception_ptr err = nullptr;
#ifdef _OPENMP
    std::mutex err_mutex;
#pragma omp parallel for schedule(static) num_threads(thread_count())
    for (Index i = 0; i < n; ++i) {
        try {
            body(i);
        } catch (...) {
            std::lock_guard<std::mutex> lock(err_mutex);
            if (!err) err = std::current_exception();
        }
    }
#else
    for (Index i = 0; i < n; ++i) {
        try {
            body(i);
        } catch (...) {
            if (!err) err = std::current_exception();
            break;
        }
    }
#endif
    if (err) std::rethrow_exception(err);
}

/// Chunked sum of body(i) over [0, n); deterministic for any thread count.
template <typename Body>
double parallel_sum(Index n, Body&& body) {
    const Index nc = chunk_count(n);
    std::vector<double> partial(static_cast<std::size_t>(nc), 0.0);
    parallel_for(nc, [&](Index c) {
        const Index lo = c * kChunkRows;
        const Index hi = std::min(n, lo + kChunkRows);
        double s = 0.0;
        for (Index i = lo; i < hi; ++i) s += body(i);
        partial[static_cast<std::size_t>(c)] = s;
    });
    double total = 0.0;
    for (double s : partial) total += s;
    return total;
}

namespace serial {

/// Reference implementation of the chunked sum; combines partials in the
/// same order as the parallel path, so both agree bitwise.
template <typename Body>
double chunked_sum(Index n, Body&& body) {
    const Index nc = chunk_count(n);
    double total = 0.0;
    for (Index c = 0; c < nc; ++c) {
        const Index lo = c * kChunkRows;
        const Index hi = std::min(n, lo + kChunkRows);
        double s = 0.0;
        for (Index i = lo; i < hi; ++i) s += body(i);
        total += s;
    }
    return total;
}

} // namespace serial

} // namespace rectiflow
