//! Mock instrument runs with a synthetic readout and optional fault injection.

use crate::canonical::{Payload, Scalar};
use crate::workflow::{Step, PERSONNEL};

use super::rng::{fnv1a64, PrngState};
use super::SimError;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InstrumentResult {
    pub step_id: String,
    pub duration_s: u64,
    pub readout: Payload,
}

/// Maps a draw to `[0, 1)` with 53 bits of precision.
fn unit(draw: u64) -> f64 {
    (draw >> 11) as f64 / (1u64 << 53) as f64
}

/// Runs `step` on a simulated instrument. The readout depends only on the
/// step itself; `rng` decides whether the run faults.
pub fn simulate_instrument(
    step: &Step,
    rng: &mut PrngState,
    fault_rate: f64,
) -> Result<InstrumentResult, SimError> {
    if fault_rate > 0.0 && unit(rng.next_u64()) < fault_rate {
        return Err(SimError::InjectedFault(step.id.clone()));
    }
    let class = step
        .requires
        .iter()
        .find(|r| r.class != PERSONNEL)
        .map(|r| r.class.clone())
        .unwrap_or_else(|| "instrument".to_owned());
    let mut signal_rng = PrngState(fnv1a64(format!("{}|{class}", step.id).as_bytes()));
    let mut readout = Payload::new();
    readout.insert("instrument".into(), Scalar::Str(class));
    readout.insert(
        "signal".into(),
        Scalar::Int((signal_rng.next_u64() % 65_536) as i64),
    );
    readout.insert("duration_s".into(), Scalar::Int(step.duration_s as i64));
    Ok(InstrumentResult {
        step_id: step.id.clone(),
        duration_s: step.duration_s,
        readout,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::workflow::StepKind;

    fn reader() -> Step {
        Step::new("read", StepKind::Instrument, 30).requiring("plate_reader", 1)
    }

    #[test]
    fn success_carries_readout() {
        let r = simulate_instrument(&reader(), &mut PrngState(1), 0.0).unwrap();
        assert_eq!(r.duration_s, 30);
        assert_eq!(r.readout["instrument"], Scalar::from("plate_reader"));
        assert!(r.readout.contains_key("signal"));
    }

    #[test]
    fn fault_rate_one_always_faults() {
        let mut rng = PrngState(7);
        for _ in 0..20 {
            assert!(matches!(
                simulate_instrument(&reader(), &mut rng, 1.0),
                Err(SimError::InjectedFault(_))
            ));
        }
    }

    #[test]
    fn fault_rate_zero_never_faults() {
        let mut rng = PrngState(7);
        assert!((0..100).all(|_| simulate_instrument(&reader(), &mut rng, 0.0).is_ok()));
    }
}
