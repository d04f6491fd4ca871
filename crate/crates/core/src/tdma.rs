//! Field devices: sensor classes, prioritized TDMA slot assignment and
//! synthetic process values.

use std::fmt;
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::qos::{QosGroup, SensorClass};
use crate::time::{nanos, SimTime};

pub const DEFAULT_SLOT_LENGTH: Duration = Duration::from_millis(10);

/// Wire size of an encoded [`ProcessValue`].
pub const PV_ENCODED_LEN: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum SensorKind {
    Temperature,
    Pressure,
    Motor,
    Valve,
    Generic,
}

impl SensorKind {
    pub fn as_str(self) -> &'static str {
        match self {
            SensorKind::Temperature => "TEMPERATURE",
            SensorKind::Pressure => "PRESSURE",
            SensorKind::Motor => "MOTOR",
            SensorKind::Valve => "VALVE",
            SensorKind::Generic => "GENERIC",
        }
    }

    /// Nominal reading around which the synthetic walk wanders.
    fn nominal(self) -> f64 {
        match self {
            SensorKind::Temperature => 60.0,    // degC
            SensorKind::Pressure => 450.0,      // kPa
            SensorKind::Motor => 1500.0,        // rpm
            SensorKind::Valve => 50.0,          // % open
            SensorKind::Generic => 0.0,
        }
    }
}

impl fmt::Display for SensorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum TdmaError {
    #[error("update interval {interval:?} outside {min:?}..={max:?} for {class}")]
    IntervalOutOfRange {
        class: SensorClass,
        interval: Duration,
        min: Duration,
        max: Duration,
    },
    #[error("{class} belongs to {expected:?}, not {got:?}")]
    GroupMismatch {
        class: SensorClass,
        expected: QosGroup,
        got: QosGroup,
    },
    #[error("no devices to schedule")]
    Empty,
    #[error("sequence number {0} used by more than one device")]
    DuplicateSeq(u32),
    #[error("slot length must be positive")]
    ZeroSlot,
}

/// Allowed update intervals per class.
pub fn interval_range(class: SensorClass) -> (Duration, Duration) {
    match class {
        SensorClass::Class0 | SensorClass::Class1 => (Duration::from_millis(10), Duration::from_millis(250)),
        SensorClass::Class2 | SensorClass::Class3 => (Duration::from_millis(10), Duration::from_millis(500)),
        SensorClass::Class4 => (Duration::from_secs(1), Duration::from_secs(5)),
        SensorClass::Class5 => (Duration::from_secs(1), Duration::from_secs(86_400)),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SensorSpec {
    pub isa_class: SensorClass,
    pub kind: SensorKind,
    pub update_interval: Duration,
    pub qos_group: QosGroup,
}

impl SensorSpec {
    pub fn new(isa_class: SensorClass, kind: SensorKind, update_interval: Duration) -> Result<Self, TdmaError> {
        let s = SensorSpec {
            isa_class,
            kind,
            update_interval,
            qos_group: isa_class.group(),
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<(), TdmaError> {
        let expected = self.isa_class.group();
        if self.qos_group != expected {
            return Err(TdmaError::GroupMismatch {
                class: self.isa_class,
                expected,
                got: self.qos_group,
            });
        }
        let (min, max) = interval_range(self.isa_class);
        if self.update_interval < min || self.update_interval > max {
            return Err(TdmaError::IntervalOutOfRange {
                class: self.isa_class,
                interval: self.update_interval,
                min,
                max,
            });
        }
        Ok(())
    }

    /// Motor speed sensor, Class 1, 50 ms.
    pub fn motor() -> Self {
        Self::new(SensorClass::Class1, SensorKind::Motor, Duration::from_millis(50)).expect("valid")
    }

    /// Pressure sensor, Class 2, 500 ms.
    pub fn pressure() -> Self {
        Self::new(SensorClass::Class2, SensorKind::Pressure, Duration::from_millis(500)).expect("valid")
    }

    /// Temperature sensor, Class 4, 1 s.
    pub fn temperature() -> Self {
        Self::new(SensorClass::Class4, SensorKind::Temperature, Duration::from_secs(1)).expect("valid")
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProcessValue {
    pub device_id: u32,
    pub value: f64,
    pub generated_at: SimTime,
}

impl ProcessValue {
    pub fn encode(&self) -> Vec<u8> {
        let mut b = Vec::with_capacity(PV_ENCODED_LEN);
        b.extend_from_slice(&self.device_id.to_le_bytes());
        b.extend_from_slice(&self.value.to_le_bytes());
        b.extend_from_slice(&self.generated_at.as_nanos().to_le_bytes());
        b
    }

    pub fn decode(b: &[u8]) -> Option<Self> {
        if b.len() != PV_ENCODED_LEN {
            return None;
        }
        let value = f64::from_le_bytes(b[4..12].try_into().ok()?);
        if !value.is_finite() {
            return None;
        }
        Some(ProcessValue {
            device_id: u32::from_le_bytes(b[0..4].try_into().ok()?),
            value,
            generated_at: SimTime::from_nanos(u64::from_le_bytes(b[12..20].try_into().ok()?)),
        })
    }
}

/// Seeded random walk producing one device's readings. Each device draws
/// from its own ChaCha stream, so devices sharing a seed stay independent.
#[derive(Debug, Clone)]
pub struct PvGenerator {
    device_id: u32,
    kind: SensorKind,
    rng: ChaCha8Rng,
    value: f64,
    last: Option<ProcessValue>,
}

impl PvGenerator {
    pub fn new(device_id: u32, kind: SensorKind, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(u64::from(device_id));
        PvGenerator {
            device_id,
            kind,
            rng,
            value: kind.nominal(),
            last: None,
        }
    }

    /// Reading at `t`. Repeated calls with the same `t` return the same value;
    /// `t` is expected to be nondecreasing across calls.
    pub fn generate(&mut self, t: SimTime) -> ProcessValue {
        if let Some(last) = self.last {
            if last.generated_at == t {
                return last;
            }
        }
        let nominal = self.kind.nominal();
        let scale = if nominal == 0.0 { 1.0 } else { nominal.abs() * 0.005 };
        let step: f64 = self.rng.gen_range(-1.0..=1.0) * scale;
        // pull gently back toward nominal so long runs stay in range
        self.value += step - 0.01 * (self.value - nominal);
        let pv = ProcessValue {
            device_id: self.device_id,
            value: self.value,
            generated_at: t,
        };
        self.last = Some(pv);
        pv
    }
}

#[derive(Debug, Clone)]
pub struct FieldDevice {
    pub device_id: u32,
    /// Site-unique ordering key within a QoS group.
    pub seq_number: u32,
    pub spec: SensorSpec,
    pub slot_index: Option<u32>,
    pub pv: PvGenerator,
}

impl FieldDevice {
    pub fn new(device_id: u32, seq_number: u32, spec: SensorSpec, seed: u64) -> Self {
        FieldDevice {
            device_id,
            seq_number,
            spec,
            slot_index: None,
            pv: PvGenerator::new(device_id, spec.kind, seed),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SlotAssignment {
    pub device_id: u32,
    pub seq_number: u32,
    pub kind: SensorKind,
    pub class: SensorClass,
    pub group: QosGroup,
    pub slot_index: u32,
    pub offset: Duration,
    pub update_interval: Duration,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Superframe {
    pub slot_length: Duration,
    pub slots: Vec<SlotAssignment>,
}

impl Superframe {
    pub fn period(&self) -> Duration {
        self.slot_length * self.slots.len() as u32
    }

    pub fn assignment(&self, device_id: u32) -> Option<&SlotAssignment> {
        self.slots.iter().find(|s| s.device_id == device_id)
    }
}

/// Orders devices by QoS group, then sequence number, and gives each the
/// slot at its position. Writes the slot index back into each device.
pub fn build_superframe(devices: &mut [FieldDevice], slot_length: Duration) -> Result<Superframe, TdmaError> {
    if devices.is_empty() {
        return Err(TdmaError::Empty);
    }
    if slot_length.is_zero() {
        return Err(TdmaError::ZeroSlot);
    }
    let mut order: Vec<usize> = (0..devices.len()).collect();
    order.sort_by_key(|&i| (devices[i].spec.qos_group, devices[i].seq_number));
    let mut seqs: Vec<u32> = devices.iter().map(|d| d.seq_number).collect();
    seqs.sort_unstable();
    if let Some(w) = seqs.windows(2).find(|w| w[0] == w[1]) {
        return Err(TdmaError::DuplicateSeq(w[0]));
    }
    let mut slots = Vec::with_capacity(devices.len());
    for (slot, &i) in order.iter().enumerate() {
        let d = &mut devices[i];
        d.slot_index = Some(slot as u32);
        slots.push(SlotAssignment {
            device_id: d.device_id,
            seq_number: d.seq_number,
            kind: d.spec.kind,
            class: d.spec.isa_class,
            group: d.spec.qos_group,
            slot_index: slot as u32,
            offset: slot_length * slot as u32,
            update_interval: d.spec.update_interval,
        });
    }
    Ok(Superframe { slot_length, slots })
}

/// Smallest `t >= now` on the device's publish grid
/// `{offset + k * interval : k >= 0}`.
pub fn next_publish_time(slot: &SlotAssignment, now: SimTime) -> SimTime {
    let offset = nanos(slot.offset);
    let interval = nanos(slot.update_interval).max(1);
    let now = now.as_nanos();
    if now <= offset {
        return SimTime::from_nanos(offset);
    }
    let k = (now - offset).div_ceil(interval);
    SimTime::from_nanos(offset + k * interval)
}

/// One site's devices: motors, then pressure, then temperature sensors,
/// with consecutive ids from `first_id` and sequence numbers from 1.
pub fn site_population(motor: usize, pressure: usize, temperature: usize, first_id: u32, seed: u64) -> Vec<FieldDevice> {
    let specs = std::iter::repeat_n(SensorSpec::motor(), motor)
        .chain(std::iter::repeat_n(SensorSpec::pressure(), pressure))
        .chain(std::iter::repeat_n(SensorSpec::temperature(), temperature));
    specs
        .enumerate()
        .map(|(i, spec)| FieldDevice::new(first_id + i as u32, i as u32 + 1, spec, seed))
        .collect()
}
