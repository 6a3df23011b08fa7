// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <atomic>
#include <cmath>
#include <condition_variable>
#include <cstddef>
#include <cstdint>
#include <cstring>
#include <functional>
#include <limits>
#include <mutex>
#include <thread>
#include <vector>

#if defined(__AVX2__) && defined(__FMA__)
#include <immintrin.h>
#define LOPR_HAVE_AVX2 1
#endif

namespace lopr::kern {

// Fixed-order reductions throughout, and fixed work partitions when
// threaded: results are identical run to run at any thread count.

inline std::atomic<int>& thread_count_ref() {
    static std::atomic<int> n{
        static_cast<int>(std::max(1u, std::min(4u, std::thread::hardware_concurrency())))};
    return n;
}

inline int threads() { return thread_count_ref().load(); }
inline void set_threads(int n) { thread_count_ref().store(std::max(1, n)); }

// Persistent helpers for splitting kernel loops. Each part writes a
// disjoint output range, so the partition never changes numeric results.
class WorkerPool {
public:
    static WorkerPool& instance() {
        static WorkerPool pool(3); // workers beyond the calling thread
        return pool;
    }

    // fn(part) for part in [0, parts); part 0 runs on the caller. Workers
    // steal remaining parts; the caller can finish every part alone, so a
    // worker sleeping through a generation is harmless.
    void run(int parts, const std::function<void(int)>& fn) {
        if (parts <= 1) {
            fn(0);
            return;
        }
        {
            std::unique_lock<std::mutex> lock(mu_);
            fn_ = &fn;
            parts_ = parts;
            next_part_ = 1;
            parts_done_ = 0;
            ++generation_;
        }
        cv_.notify_all();
        fn(0);
        {
            std::unique_lock<std::mutex> lock(mu_);
            ++parts_done_;
        }
        while (true) {
            int part = -1;
            {
                std::unique_lock<std::mutex> lock(mu_);
                if (next_part_ < parts_) {
                    part = next_part_++;
                }
            }
            if (part < 0) {
                break;
            }
            fn(part);
            std::unique_lock<std::mutex> lock(mu_);
            ++parts_done_;
        }
        std::unique_lock<std::mutex> lock(mu_);
        done_cv_.wait(lock, [&] { return parts_done_ == parts_; });
        fn_ = nullptr;
    }

private:
    explicit WorkerPool(int n_workers) {
        for (int i = 0; i < n_workers; ++i) {
            threads_.emplace_back([this] { worker_loop(); });
        }
    }

    ~WorkerPool() {
        {
            std::unique_lock<std::mutex> lock(mu_);
            stop_ = true;
            ++generation_;
        }
        cv_.notify_all();
        for (auto& t : threads_) {
            t.join();
        }
    }

    void worker_loop() {
        std::uint64_t seen = 0;
        while (true) {
            const std::function<void(int)>* fn = nullptr;
            {
                std::unique_lock<std::mutex> lock(mu_);
                cv_.wait(lock, [&] { return stop_ || generation_ != seen; });
                seen = generation_;
                if (stop_) {
                    return;
                }
                fn = fn_;
            }
            if (fn == nullptr) {
                continue;
            }
            while (true) {
                int part = -1;
                {
                    std::unique_lock<std::mutex> lock(mu_);
                    if (fn_ != fn || next_part_ >= parts_) {
                        break;
                    }
                    part = next_part_++;
                }
                (*fn)(part);
                std::unique_lock<std::mutex> lock(mu_);
                ++parts_done_;
                if (parts_done_ == parts_) {
                    done_cv_.notify_all();
                }
            }
        }
    }

    std::vector<std::thread> threads_;
    std::mutex mu_;
    std::condition_variable cv_;
    std::condition_variable done_cv_;
    const std::function<void(int)>* fn_ = nullptr;
    int parts_ = 0;
    int next_part_ = 0;
    int parts_done_ = 0;
    std::uint64_t generation_ = 0;
    bool stop_ = false;
};

// Splits [0, n) into the configured number of contiguous ranges and runs
// fn(begin, end) on each; ranges are fixed by n and the thread setting.
inline void parallel_ranges(std::int64_t n, std::int64_t min_per_part,
                            const std::function<void(std::int64_t, std::int64_t)>& fn) {
    const int want = threads();
    int parts = static_cast<int>(std::min<std::int64_t>(want, n / std::max<std::int64_t>(1, min_per_part)));
    if (parts <= 1) {
        fn(0, n);
        return;
    }
    const std::int64_t chunk = (n + parts - 1) / parts;
    WorkerPool::instance().run(parts, [&](int part) {
        const std::int64_t begin = part * chunk;
        const std::int64_t end = std::min<std::int64_t>(n, begin + chunk);
        if (begin < end) {
            fn(begin, end);
        }
    });
}

#ifdef LOPR_HAVE_AVX2
inline float dot(const float* a, const float* b, int n) {
    __m256 acc0 = _mm256_setzero_ps();
    __m256 acc1 = _mm256_setzero_ps();
    int p = 0;
    for (; p + 16 <= n; p += 16) {
        acc0 = _mm256_fmadd_ps(_mm256_loadu_ps(a + p), _mm256_loadu_ps(b + p), acc0);
        acc1 = _mm256_fmadd_ps(_mm256_loadu_ps(a + p + 8), _mm256_loadu_ps(b + p + 8), acc1);
    }
    for (; p + 8 <= n; p += 8) {
        acc0 = _mm256_fmadd_ps(_mm256_loadu_ps(a + p), _mm256_loadu_ps(b + p), acc0);
    }
    const __m256 acc = _mm256_add_ps(acc0, acc1);
    __m128 s = _mm_add_ps(_mm256_castps256_ps128(acc), _mm256_extractf128_ps(acc, 1));
    s = _mm_add_ps(s, _mm_movehl_ps(s, s));
    s = _mm_add_ss(s, _mm_shuffle_ps(s, s, 1));
    float r = _mm_cvtss_f32(s);
    for (; p < n; ++p) {
        r += a[p] * b[p];
    }
    return r;
}
#else
inline float dot(const float* a, const float* b, int n) {
    float a0 = 0.f, a1 = 0.f, a2 = 0.f, a3 = 0.f;
    int p = 0;
    for (; p + 4 <= n; p += 4) {
        a0 += a[p] * b[p];
        a1 += a[p + 1] * b[p + 1];
        a2 += a[p + 2] * b[p + 2];
        a3 += a[p + 3] * b[p + 3];
    }
    float r = (a0 + a1) + (a2 + a3);
    for (; p < n; ++p) {
        r += a[p] * b[p];
    }
    return r;
}
#endif

inline double dot(const double* a, const double* b, int n) {
    double a0 = 0.0, a1 = 0.0, a2 = 0.0, a3 = 0.0;
    int p = 0;
    for (; p + 4 <= n; p += 4) {
        a0 += a[p] * b[p];
        a1 += a[p + 1] * b[p + 1];
        a2 += a[p + 2] * b[p + 2];
        a3 += a[p + 3] * b[p + 3];
    }
    double r = (a0 + a1) + (a2 + a3);
    for (; p < n; ++p) {
        r += a[p] * b[p];
    }
    return r;
}

// exp via 2^k * e^r with a degree-6 polynomial on the reduced range;
// relative error below 2e-7. Double keeps the libm path (gradient checks).
inline float fast_exp(float x) {
    if (x < -87.0f) {
        return 0.0f;
    }
    if (x > 88.0f) {
        return std::numeric_limits<float>::infinity();
    }
    const float k = std::floor(x * 1.44269504088896341f + 0.5f);
    const float r = x - k * 0.693147180559945286f;
    float p = 1.0f / 720.0f;
    p = p * r + 1.0f / 120.0f;
    p = p * r + 1.0f / 24.0f;
    p = p * r + 1.0f / 6.0f;
    p = p * r + 0.5f;
    p = p * r + 1.0f;
    p = p * r + 1.0f;
    const auto bits = static_cast<std::uint32_t>(static_cast<int>(k) + 127) << 23;
    float scale;
    std::memcpy(&scale, &bits, sizeof(scale));
    return p * scale;
}

inline double fast_exp(double x) { return std::exp(x); }

// Abramowitz-Stegun 7.1.26 rational approximation, |err| <= 1.5e-7
inline float fast_erf(float x) {
    const float sign = x < 0.0f ? -1.0f : 1.0f;
    const float ax = std::abs(x);
    const float t = 1.0f / (1.0f + 0.3275911f * ax);
    float poly = 1.061405429f;
    poly = poly * t - 1.453152027f;
    poly = poly * t + 1.421413741f;
    poly = poly * t - 0.284496736f;
    poly = poly * t + 0.254829592f;
    const float y = 1.0f - poly * t * fast_exp(-ax * ax);
    return sign * y;
}

inline double fast_erf(double x) { return std::erf(x); }

// threshold in multiply-adds below which a kernel stays single threaded
inline constexpr std::int64_t kParallelGrain = 1 << 20;

// C[m,n] (+)= A[m,k] * B[n,k]^T   (row-parallel, disjoint C rows)
template <typename S>
void gemm_nt(const S* a, const S* b, S* c, int m, int n, int k, bool accumulate = false) {
    const std::int64_t per_row = static_cast<std::int64_t>(n) * k;
    parallel_ranges(m, std::max<std::int64_t>(1, kParallelGrain / std::max<std::int64_t>(1, per_row)),
                    [&](std::int64_t i0, std::int64_t i1) {
                        for (std::int64_t i = i0; i < i1; ++i) {
                            const S* ai = a + static_cast<std::size_t>(i) * k;
                            S* ci = c + static_cast<std::size_t>(i) * n;
                            for (int j = 0; j < n; ++j) {
                                const S v = dot(ai, b + static_cast<std::size_t>(j) * k, k);
                                ci[j] = accumulate ? ci[j] + v : v;
                            }
                        }
                    });
}

// C[m,n] (+)= A[m,k] * B[k,n]   (row-parallel, disjoint C rows)
template <typename S>
void gemm_nn(const S* a, const S* b, S* c, int m, int n, int k, bool accumulate = false) {
    const std::int64_t per_row = static_cast<std::int64_t>(n) * k;
    parallel_ranges(m, std::max<std::int64_t>(1, kParallelGrain / std::max<std::int64_t>(1, per_row)),
                    [&](std::int64_t i0, std::int64_t i1) {
                        for (std::int64_t i = i0; i < i1; ++i) {
                            S* ci = c + static_cast<std::size_t>(i) * n;
                            if (!accumulate) {
                                for (int j = 0; j < n; ++j) {
                                    ci[j] = S(0);
                                }
                            }
                            const S* ai = a + static_cast<std::size_t>(i) * k;
                            for (int p = 0; p < k; ++p) {
                                const S av = ai[p];
                                const S* bp = b + static_cast<std::size_t>(p) * n;
                                for (int j = 0; j < n; ++j) {
                                    ci[j] += av * bp[j];
                                }
                            }
                        }
                    });
}

// C[k,n] (+)= A[m,k]^T * B[m,n]
// Serial: a k-partition re-streams both inputs per thread and loses to
// memory bandwidth on this shape.
template <typename S>
void gemm_tn(const S* a, const S* b, S* c, int m, int n, int k, bool accumulate = true) {
    if (!accumulate) {
        for (std::size_t i = 0; i < static_cast<std::size_t>(k) * n; ++i) {
            c[i] = S(0);
        }
    }
    for (int i = 0; i < m; ++i) {
        const S* ai = a + static_cast<std::size_t>(i) * k;
        const S* bi = b + static_cast<std::size_t>(i) * n;
        for (int p = 0; p < k; ++p) {
            const S av = ai[p];
            S* cp = c + static_cast<std::size_t>(p) * n;
            for (int j = 0; j < n; ++j) {
                cp[j] += av * bi[j];
            }
        }
    }
}

} // namespace lopr::kern
