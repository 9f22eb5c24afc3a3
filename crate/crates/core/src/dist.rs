/// Common contract for every model output: a predictive distribution over
/// service time in seconds.
pub trait PredictiveDistribution {
    fn cdf(&self, y: f64) -> f64;

    /// Generalized inverse of [`cdf`](Self::cdf).
    fn quantile(&self, tau: f64) -> f64;

    fn median(&self) -> f64 {
        self.quantile(0.5)
    }

    /// P(T > t).
    fn exceedance(&self, t: f64) -> f64 {
        1.0 - self.cdf(t)
    }

    /// Central interval holding `coverage` of the mass.
    fn central_interval(&self, coverage: f64) -> (f64, f64) {
        let tail = (1.0 - coverage) / 2.0;
        (self.quantile(tail), self.quantile(1.0 - tail))
    }
}
