//! Bounded pool for running service bodies off the signal-handling path.

use std::sync::mpsc::{channel, Sender};
use std::sync::Arc;
use std::thread::JoinHandle;

use parking_lot::Mutex;

pub type Job = Box<dyn FnOnce() + Send + 'static>;

pub trait Executor: Send + Sync {
    /// Queues `job`. Must return without waiting for the job to run.
    fn submit(&self, job: Job);
}

/// Fixed set of `n` worker threads sharing one unbounded queue; at most `n`
/// jobs run at once.
pub struct ThreadPool {
    sender: Mutex<Option<Sender<Job>>>,
    workers: Vec<JoinHandle<()>>,
}

impl ThreadPool {
    pub const DEFAULT_SIZE: usize = 4;

    pub fn new(size: usize) -> Self {
        assert!(size > 0, "pool size must be positive");
        let (tx, rx) = channel::<Job>();
        let rx = Arc::new(Mutex::new(rx));
        let workers = (0..size)
            .map(|i| {
                let rx = rx.clone();
                std::thread::Builder::new()
                    .name(format!("service-worker-{i}"))
                    .spawn(move || loop {
                        let job = rx.lock().recv();
                        match job {
                            Ok(job) => job(),
                            Err(_) => break,
                        }
                    })
                    .expect("spawn worker thread")
            })
            .collect();
        Self { sender: Mutex::new(Some(tx)), workers }
    }

    pub fn size(&self) -> usize {
        self.workers.len()
    }
}

impl Executor for ThreadPool {
    fn submit(&self, job: Job) {
        if let Some(sender) = self.sender.lock().as_ref() {
            if sender.send(job).is_err() {
                tracing::error!("worker pool is gone; job dropped");
            }
        }
    }
}

impl Drop for ThreadPool {
    fn drop(&mut self) {
        self.sender.lock().take();
        for worker in self.workers.drain(..) {
            // a worker may be the one dropping the last handle to the pool
            if worker.thread().id() != std::thread::current().id() {
                let _ = worker.join();
            }
        }
    }
}
