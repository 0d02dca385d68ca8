use serde::{Deserialize, Serialize};

/// Mean function `h` mapping a linear predictor to the marginal mean.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LinkFunction {
    Identity,
    Logit,
}

impl LinkFunction {
    #[inline]
    pub fn forward(self, eta: f64) -> f64 {
        match self {
            LinkFunction::Identity => eta,
            LinkFunction::Logit => {
                if eta >= 0.0 {
                    1.0 / (1.0 + (-eta).exp())
                } else {
                    let e = eta.exp();
                    e / (1.0 + e)
                }
            }
        }
    }

    /// dμ/dη.
    #[inline]
    pub fn derivative(self, eta: f64) -> f64 {
        match self {
            LinkFunction::Identity => 1.0,
            LinkFunction::Logit => {
                let mu = self.forward(eta);
                mu * (1.0 - mu)
            }
        }
    }

    pub fn code(self) -> u8 {
        match self {
            LinkFunction::Identity => 0,
            LinkFunction::Logit => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(LinkFunction::Identity),
            1 => Some(LinkFunction::Logit),
            _ => None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_is_trivial() {
        for eta in [-3.0, 0.0, 2.5] {
            assert_eq!(LinkFunction::Identity.forward(eta), eta);
            assert_eq!(LinkFunction::Identity.derivative(eta), 1.0);
        }
    }

    #[test]
    fn logit_stays_in_unit_interval() {
        for eta in [-700.0, -30.0, -1.0, 0.0, 1.0, 30.0] {
            let mu = LinkFunction::Logit.forward(eta);
            assert!((0.0..=1.0).contains(&mu));
            let d = LinkFunction::Logit.derivative(eta);
            assert!((d - mu * (1.0 - mu)).abs() < 1e-15);
        }
        assert_eq!(LinkFunction::Logit.forward(0.0), 0.5);
        let h = 1e-6;
        let fd = (LinkFunction::Logit.forward(0.3 + h) - LinkFunction::Logit.forward(0.3 - h)) / (2.0 * h);
        assert!((fd - LinkFunction::Logit.derivative(0.3)).abs() < 1e-9);
    }
}
