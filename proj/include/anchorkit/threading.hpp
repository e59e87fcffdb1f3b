#ifndef ANCHORKIT_THREADING_HPP
#define ANCHORKIT_THREADING_HPP

#include <atomic>
#include <condition_variable>
#include <deque>
#include <functional>
#include <memory>
#include <mutex>
#include <thread>
#include <vector>

namespace anchorkit {

// Minimal fixed-size worker pool. Every parallel site in the pipeline writes
// to disjoint slots and keeps reductions sequential, so results are
// bit-identical for any pool size (including 1, which runs inline).
class ThreadPool {
public:
    explicit ThreadPool(int threads) {
        if (threads < 1) threads = 1;
        n_threads_ = threads;
        for (int i = 0; i < threads - 1; ++i) {
            workers_.emplace_back([this] { worker_loop(); });
        }
    }

    ThreadPool(const ThreadPool&) = delete;
    ThreadPool& operator=(const ThreadPool&) = delete;

    ~ThreadPool() {
        {
            std::unique_lock<std::mutex> lock(mu_);
            stop_ = true;
        }
        cv_.notify_all();
        for (auto& w : workers_) w.join();
    }

    int size() const { return n_threads_; }

    // Runs fn(i) for i in [0, n). Blocks until all items finish. The calling
    // thread participates, so a 1-thread pool degenerates to a plain loop.
    void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn) {
        if (n == 0) return;
        if (workers_.empty() || n == 1) {
            for (std::size_t i = 0; i < n; ++i) fn(i);
            return;
        }
        // Shared job state: a queued copy of `body` may fire after this call
        // returns, so it must not touch the caller's stack. The fn pointer is
        // only dereferenced for claimed items, and the caller outlives those.
        struct Job {
            std::atomic<std::size_t> next{0};
            std::atomic<std::size_t> done{0};
            std::size_t n = 0;
            const std::function<void(std::size_t)>* fn = nullptr;
            std::mutex mu;
            std::condition_variable cv;
        };
        auto job = std::make_shared<Job>();
        job->n = n;
        job->fn = &fn;

        auto body = [job]() {
            for (;;) {
                std::size_t i = job->next.fetch_add(1);
                if (i >= job->n) break;
                (*job->fn)(i);
                if (job->done.fetch_add(1) + 1 == job->n) {
                    std::unique_lock<std::mutex> lock(job->mu);
                    job->cv.notify_all();
                }
            }
        };

        {
            std::unique_lock<std::mutex> lock(mu_);
            for (std::size_t k = 0; k + 1 < static_cast<std::size_t>(n_threads_) && k + 1 < n; ++k)
                queue_.push_back(body);
        }
        cv_.notify_all();
        body();
        std::unique_lock<std::mutex> lock(job->mu);
        job->cv.wait(lock, [&] { return job->done.load() >= job->n; });
    }

private:
    void worker_loop() {
        for (;;) {
            std::function<void()> task;
            {
                std::unique_lock<std::mutex> lock(mu_);
                cv_.wait(lock, [this] { return stop_ || !queue_.empty(); });
                if (stop_ && queue_.empty()) return;
                task = std::move(queue_.front());
                queue_.pop_front();
            }
            task();
        }
    }

    int n_threads_ = 1;
    std::vector<std::thread> workers_;
    std::deque<std::function<void()>> queue_;
    std::mutex mu_;
    std::condition_variable cv_;
    bool stop_ = false;
};

}  // namespace anchorkit

#endif
