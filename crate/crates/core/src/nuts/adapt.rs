//! Step size and mass matrix adaptation during warmup.

/// Nesterov dual averaging of `log(eps)` toward a target acceptance rate.
#[derive(Debug, Clone)]
pub struct DualAveraging {
    delta: f64,
    gamma: f64,
    t0: f64,
    kappa: f64,
    mu: f64,
    counter: f64,
    s_bar: f64,
    x_bar: f64,
}

impl DualAveraging {
    pub fn new(eps: f64, delta: f64) -> Self {
        let mut da = Self { delta, gamma: 0.05, t0: 10.0, kappa: 0.75, mu: 0.0, counter: 0.0, s_bar: 0.0, x_bar: 0.0 };
        da.restart(eps);
        da
    }

    /// Forgets the history and recentres on `10 * eps`.
    pub fn restart(&mut self, eps: f64) {
        self.mu = (10.0 * eps).ln();
        self.counter = 0.0;
        self.s_bar = 0.0;
        self.x_bar = 0.0;
    }

    /// Feeds one acceptance statistic and returns the next step size.
    pub fn update(&mut self, accept: f64) -> f64 {
        self.counter += 1.0;
        let accept = if accept.is_nan() { 0.0 } else { accept.min(1.0) };
        let eta = 1.0 / (self.counter + self.t0);
        self.s_bar = (1.0 - eta) * self.s_bar + eta * (self.delta - accept);
        let x = self.mu - self.s_bar * self.counter.sqrt() / self.gamma;
        let w = self.counter.powf(-self.kappa);
        self.x_bar = (1.0 - w) * self.x_bar + w * x;
        x.exp()
    }

    /// The averaged iterate, used once warmup ends.
    pub fn final_step_size(&self) -> f64 {
        self.x_bar.exp()
    }
}

/// Stan's expanding-window schedule for a diagonal metric: an initial
/// buffer, windows doubling from a base size, and a terminal buffer.
#[derive(Debug, Clone)]
pub struct WindowedVariance {
    warmup: usize,
    init_buffer: usize,
    term_buffer: usize,
    window_size: usize,
    next_window: usize,
    counter: usize,
    n: usize,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl WindowedVariance {
    pub fn new(dim: usize, warmup: usize) -> Self {
        let (mut init_buffer, mut term_buffer, mut base) = (75, 50, 25);
        if init_buffer + term_buffer + base > warmup {
            init_buffer = (0.15 * warmup as f64) as usize;
            term_buffer = (0.1 * warmup as f64) as usize;
            base = warmup.saturating_sub(init_buffer + term_buffer);
            if warmup >= 20 {
                log::warn!(
                    "warmup of {warmup} is too short for the default windows; using buffers {init_buffer}/{base}/{term_buffer}"
                );
            }
        }
        Self {
            warmup,
            init_buffer,
            term_buffer,
            window_size: base,
            next_window: (init_buffer + base).saturating_sub(1),
            counter: 0,
            n: 0,
            mean: vec![0.0; dim],
            m2: vec![0.0; dim],
        }
    }

    fn in_window(&self) -> bool {
        self.counter >= self.init_buffer
            && self.counter < self.warmup.saturating_sub(self.term_buffer)
            && self.counter != self.warmup
    }

    fn end_of_window(&self) -> bool {
        self.counter == self.next_window && self.counter != self.warmup
    }

    fn compute_next_window(&mut self) {
        let last = self.warmup.saturating_sub(self.term_buffer + 1);
        if self.next_window == last {
            return;
        }
        self.window_size *= 2;
        self.next_window = self.counter + self.window_size;
        if self.next_window != last {
            let boundary = self.next_window + 2 * self.window_size;
            if boundary >= self.warmup - self.term_buffer {
                self.next_window = last;
            }
        }
    }

    /// Records a warmup draw. At the end of a window returns the new
    /// regularized variance estimate and starts the next window.
    pub fn observe(&mut self, q: &[f64]) -> Option<Vec<f64>> {
        if self.warmup < 20 {
            return None;
        }
        if self.in_window() {
            self.n += 1;
            let n = self.n as f64;
            for ((m, s), &x) in self.mean.iter_mut().zip(self.m2.iter_mut()).zip(q) {
                let d = x - *m;
                *m += d / n;
                *s += d * (x - *m);
            }
        }
        if self.end_of_window() {
            self.compute_next_window();
            let n = self.n as f64;
            let var = self
                .m2
                .iter()
                .map(|s| {
                    let v = if self.n > 1 { s / (n - 1.0) } else { 1.0 };
                    (n / (n + 5.0)) * v + 1e-3 * (5.0 / (n + 5.0))
                })
                .collect();
            self.n = 0;
            self.mean.iter_mut().for_each(|m| *m = 0.0);
            self.m2.iter_mut().for_each(|m| *m = 0.0);
            self.counter += 1;
            return Some(var);
        }
        self.counter += 1;
        None
    }
}
