//! Bulk pipe abstraction.
//!
//! A [`BulkPipe`] is one claimed mass-storage interface: a bulk IN endpoint,
//! a bulk OUT endpoint and the class-specific control requests. Transfers
//! take a buffer plus an offset and length, so callers can move a slice of a
//! larger buffer without copying it first.
//!
//! [`LoopbackPipe`] connects the pipe contract to an in-process
//! [`TargetEmulator`]. Real-hardware backends would map [`ControlRequest`]
//! onto the class-specific request codes; the loopback handles them
//! symbolically.

use std::time::Duration;

use thiserror::Error;

use crate::blockdev::BlockDevice;
use crate::scsi::target::{PendingCommand, TargetEmulator, TargetEvent};
use crate::scsi::{CommandBlockWrapper, Direction};

/// Default per-transfer timeout for hardware backends. The loopback never
/// blocks, so it only reports this value.
pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(21);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Endpoint {
    In,
    Out,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ControlRequest {
    BulkOnlyReset,
    GetMaxLun,
    ClearHaltIn,
    ClearHaltOut,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TransportError {
    #[error("{0:?} endpoint stalled")]
    Stall(Endpoint),
    #[error("pipe closed")]
    Closed,
    #[error("transfer timed out after {0:?}")]
    Timeout(Duration),
    #[error("control request {0:?} failed")]
    ControlFailed(ControlRequest),
    #[error("transfer out of sequence: {0}")]
    OutOfSequence(&'static str),
    #[error("device sent more data than the {0}-byte transfer can hold")]
    Overflow(usize),
    #[error("range {offset}+{len} exceeds buffer of {buf_len} bytes")]
    BufferRange {
        offset: usize,
        len: usize,
        buf_len: usize,
    },
}

fn check_range(buf_len: usize, offset: usize, len: usize) -> Result<(), TransportError> {
    match offset.checked_add(len) {
        Some(end) if end <= buf_len => Ok(()),
        _ => Err(TransportError::BufferRange {
            offset,
            len,
            buf_len,
        }),
    }
}

pub trait BulkPipe {
    /// Sends `buf[offset..offset + len]` on the OUT endpoint and returns the
    /// number of bytes transferred.
    fn bulk_out(&mut self, buf: &[u8], offset: usize, len: usize) -> Result<usize, TransportError>;

    /// Receives up to `len` bytes into `buf[offset..]`. A short count means
    /// the device ended the transfer early.
    fn bulk_in(
        &mut self,
        buf: &mut [u8],
        offset: usize,
        len: usize,
    ) -> Result<usize, TransportError>;

    /// Issues a class-specific request. Only `GetMaxLun` returns a byte.
    fn control(&mut self, request: ControlRequest) -> Result<Option<u8>, TransportError>;

    fn timeout(&self) -> Duration {
        DEFAULT_TIMEOUT
    }
}

impl<P: BulkPipe + ?Sized> BulkPipe for &mut P {
    fn bulk_out(&mut self, buf: &[u8], offset: usize, len: usize) -> Result<usize, TransportError> {
        (**self).bulk_out(buf, offset, len)
    }
    fn bulk_in(
        &mut self,
        buf: &mut [u8],
        offset: usize,
        len: usize,
    ) -> Result<usize, TransportError> {
        (**self).bulk_in(buf, offset, len)
    }
    fn control(&mut self, request: ControlRequest) -> Result<Option<u8>, TransportError> {
        (**self).control(request)
    }
    fn timeout(&self) -> Duration {
        (**self).timeout()
    }
}

impl<P: BulkPipe + ?Sized> BulkPipe for Box<P> {
    fn bulk_out(&mut self, buf: &[u8], offset: usize, len: usize) -> Result<usize, TransportError> {
        (**self).bulk_out(buf, offset, len)
    }
    fn bulk_in(
        &mut self,
        buf: &mut [u8],
        offset: usize,
        len: usize,
    ) -> Result<usize, TransportError> {
        (**self).bulk_in(buf, offset, len)
    }
    fn control(&mut self, request: ControlRequest) -> Result<Option<u8>, TransportError> {
        (**self).control(request)
    }
    fn timeout(&self) -> Duration {
        (**self).timeout()
    }
}

/// Adapts a pipe to a backend that can only transfer from the start of a
/// buffer: non-zero offsets go through a temporary buffer.
pub struct ZeroOffsetPipe<P> {
    inner: P,
    scratch: Vec<u8>,
}

impl<P: BulkPipe> ZeroOffsetPipe<P> {
    pub fn new(inner: P) -> Self {
        ZeroOffsetPipe {
            inner,
            scratch: Vec::new(),
        }
    }

    pub fn inner(&self) -> &P {
        &self.inner
    }

    pub fn into_inner(self) -> P {
        self.inner
    }
}

impl<P: BulkPipe> BulkPipe for ZeroOffsetPipe<P> {
    fn bulk_out(&mut self, buf: &[u8], offset: usize, len: usize) -> Result<usize, TransportError> {
        check_range(buf.len(), offset, len)?;
        if offset == 0 {
            return self.inner.bulk_out(buf, 0, len);
        }
        self.scratch.clear();
        self.scratch.extend_from_slice(&buf[offset..offset + len]);
        self.inner.bulk_out(&self.scratch, 0, len)
    }

    fn bulk_in(
        &mut self,
        buf: &mut [u8],
        offset: usize,
        len: usize,
    ) -> Result<usize, TransportError> {
        check_range(buf.len(), offset, len)?;
        if offset == 0 {
            return self.inner.bulk_in(buf, 0, len);
        }
        self.scratch.resize(len, 0);
        let n = self.inner.bulk_in(&mut self.scratch, 0, len)?;
        buf[offset..offset + n].copy_from_slice(&self.scratch[..n]);
        Ok(n)
    }

    fn control(&mut self, request: ControlRequest) -> Result<Option<u8>, TransportError> {
        self.inner.control(request)
    }

    fn timeout(&self) -> Duration {
        self.inner.timeout()
    }
}

enum Phase {
    Idle,
    DataOut {
        pending: PendingCommand,
        received: Vec<u8>,
        expected: usize,
    },
    DataIn {
        data: Vec<u8>,
        pos: usize,
        csw: [u8; 13],
    },
    Status {
        csw: [u8; 13],
    },
}

/// In-memory pipe whose OUT traffic drives a [`TargetEmulator`] and whose
/// IN traffic drains its responses, one BOT phase at a time.
pub struct LoopbackPipe<D> {
    target: TargetEmulator<D>,
    phase: Phase,
    halted_in: bool,
    halted_out: bool,
    closed: bool,
    timeout: Duration,
    capture: Option<Vec<(Endpoint, Vec<u8>)>>,
}

/// Wires a pipe to `target`.
pub fn loopback_pair<D: BlockDevice>(target: TargetEmulator<D>) -> LoopbackPipe<D> {
    LoopbackPipe::new(target)
}

impl<D: BlockDevice> LoopbackPipe<D> {
    pub fn new(target: TargetEmulator<D>) -> Self {
        LoopbackPipe {
            target,
            phase: Phase::Idle,
            halted_in: false,
            halted_out: false,
            closed: false,
            timeout: DEFAULT_TIMEOUT,
            capture: None,
        }
    }

    pub fn set_timeout(&mut self, timeout: Duration) {
        self.timeout = timeout;
    }

    pub fn target(&self) -> &TargetEmulator<D> {
        &self.target
    }

    pub fn target_mut(&mut self) -> &mut TargetEmulator<D> {
        &mut self.target
    }

    pub fn into_target(self) -> TargetEmulator<D> {
        self.target
    }

    pub fn close(&mut self) {
        self.closed = true;
    }

    pub fn is_halted(&self, ep: Endpoint) -> bool {
        match ep {
            Endpoint::In => self.halted_in,
            Endpoint::Out => self.halted_out,
        }
    }

    /// Records every byte chunk crossing the pipe from now on.
    pub fn start_capture(&mut self) {
        self.capture = Some(Vec::new());
    }

    pub fn take_capture(&mut self) -> Vec<(Endpoint, Vec<u8>)> {
        self.capture.take().unwrap_or_default()
    }

    fn captured(&mut self, ep: Endpoint, bytes: &[u8]) {
        if let Some(c) = self.capture.as_mut() {
            c.push((ep, bytes.to_vec()));
        }
    }

    fn halt_in(&mut self) {
        self.halted_in = true;
    }

    fn start_command(&mut self, bytes: &[u8]) {
        let pending = self.target.begin(bytes);
        if pending.stalls_out() {
            self.halted_out = true;
            let tx = self.target.complete(pending, None);
            self.phase = Phase::Status { csw: tx.csw };
            return;
        }
        let expected = pending.host_data_len();
        if expected > 0 {
            self.phase = Phase::DataOut {
                pending,
                received: Vec::with_capacity(expected),
                expected,
            };
            return;
        }
        let wants_in = pending
            .cbw()
            .map(|c: &CommandBlockWrapper| c.direction() == Direction::In)
            .unwrap_or(false);
        let tx = self.target.complete(pending, None);
        self.phase = match tx.data {
            Some(data) if !tx.stall_in && !data.is_empty() => Phase::DataIn {
                data,
                pos: 0,
                csw: tx.csw,
            },
            _ => {
                // No data for an IN request: the device halts the IN pipe
                // and the host has to clear it before reading the CSW.
                if tx.stall_in || wants_in {
                    if !tx.stall_in {
                        self.target.record(TargetEvent::Stalled(Endpoint::In));
                    }
                    self.halt_in();
                }
                Phase::Status { csw: tx.csw }
            }
        };
    }
}

impl<D: BlockDevice> BulkPipe for LoopbackPipe<D> {
    fn bulk_out(&mut self, buf: &[u8], offset: usize, len: usize) -> Result<usize, TransportError> {
        check_range(buf.len(), offset, len)?;
        if self.closed {
            return Err(TransportError::Closed);
        }
        if self.halted_out {
            return Err(TransportError::Stall(Endpoint::Out));
        }
        let bytes = &buf[offset..offset + len];
        match &mut self.phase {
            Phase::Idle => {
                self.captured(Endpoint::Out, bytes);
                self.start_command(bytes);
                Ok(len)
            }
            Phase::DataOut {
                received, expected, ..
            } => {
                let n = len.min(*expected - received.len());
                received.extend_from_slice(&bytes[..n]);
                let done = received.len() == *expected;
                self.captured(Endpoint::Out, &bytes[..n]);
                if done {
                    if let Phase::DataOut {
                        pending, received, ..
                    } = std::mem::replace(&mut self.phase, Phase::Idle)
                    {
                        let tx = self.target.complete(pending, Some(&received));
                        self.phase = Phase::Status { csw: tx.csw };
                    }
                }
                Ok(n)
            }
            Phase::DataIn { .. } | Phase::Status { .. } => Err(TransportError::OutOfSequence(
                "command sent before the previous status was read",
            )),
        }
    }

    fn bulk_in(
        &mut self,
        buf: &mut [u8],
        offset: usize,
        len: usize,
    ) -> Result<usize, TransportError> {
        check_range(buf.len(), offset, len)?;
        if self.closed {
            return Err(TransportError::Closed);
        }
        if self.halted_in {
            return Err(TransportError::Stall(Endpoint::In));
        }
        match &mut self.phase {
            Phase::Idle => Err(TransportError::OutOfSequence("no transaction in progress")),
            Phase::DataOut { .. } => Err(TransportError::OutOfSequence(
                "device is waiting for host data",
            )),
            Phase::DataIn { data, pos, csw } => {
                let n = len.min(data.len() - *pos);
                buf[offset..offset + n].copy_from_slice(&data[*pos..*pos + n]);
                *pos += n;
                let chunk = buf[offset..offset + n].to_vec();
                if *pos == data.len() {
                    let csw = *csw;
                    self.phase = Phase::Status { csw };
                }
                self.captured(Endpoint::In, &chunk);
                Ok(n)
            }
            Phase::Status { csw } => {
                if len < csw.len() {
                    return Err(TransportError::Overflow(len));
                }
                let csw = *csw;
                buf[offset..offset + csw.len()].copy_from_slice(&csw);
                self.phase = Phase::Idle;
                self.captured(Endpoint::In, &csw);
                Ok(csw.len())
            }
        }
    }

    fn control(&mut self, request: ControlRequest) -> Result<Option<u8>, TransportError> {
        if self.closed {
            return Err(TransportError::Closed);
        }
        let reply = self.target.handle_control(request)?;
        match request {
            ControlRequest::BulkOnlyReset => self.phase = Phase::Idle,
            ControlRequest::ClearHaltIn => self.halted_in = false,
            ControlRequest::ClearHaltOut => self.halted_out = false,
            ControlRequest::GetMaxLun => {}
        }
        Ok(reply)
    }

    fn timeout(&self) -> Duration {
        self.timeout
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blockdev::MemDevice;
    use crate::scsi::target::{Fault, FaultAction, FaultTrigger};
    use crate::scsi::{parse_csw, CswStatus, ScsiCommand};
    use proptest::prelude::*;

    fn pipe() -> LoopbackPipe<MemDevice> {
        loopback_pair(TargetEmulator::new(MemDevice::new(512, 64).unwrap()))
    }

    fn cbw(tag: u32, cmd: ScsiCommand, len: u32) -> [u8; 31] {
        CommandBlockWrapper::new(tag, len, cmd.direction(), 0, &cmd.to_bytes())
            .unwrap()
            .to_bytes()
            .unwrap()
    }

    #[test]
    fn cbw_reaches_target() {
        let mut p = pipe();
        let raw = cbw(1, ScsiCommand::test_unit_ready(), 0);
        assert_eq!(p.bulk_out(&raw, 0, 31).unwrap(), 31);
        assert_eq!(
            p.target().events()[0],
            TargetEvent::CbwReceived {
                tag: 1,
                opcode: Some(0)
            }
        );
        let mut csw = [0u8; 13];
        assert_eq!(p.bulk_in(&mut csw, 0, 13).unwrap(), 13);
        assert_eq!(parse_csw(&csw, 1).unwrap().status, CswStatus::Passed);
    }

    #[test]
    fn inquiry_transaction_then_reuse() {
        let mut p = pipe();
        for tag in 1..=2 {
            p.bulk_out(&cbw(tag, ScsiCommand::inquiry(36), 36), 0, 31)
                .unwrap();
            let mut data = [0u8; 64];
            assert_eq!(p.bulk_in(&mut data, 0, 36).unwrap(), 36);
            let mut csw = [0u8; 13];
            assert_eq!(p.bulk_in(&mut csw, 0, 13).unwrap(), 13);
            assert_eq!(parse_csw(&csw, tag).unwrap().data_residue, 0);
        }
    }

    #[test]
    fn offset_out_matches_slice() {
        let raw = cbw(5, ScsiCommand::test_unit_ready(), 0);
        let mut padded = vec![0xeeu8; 7];
        padded.extend_from_slice(&raw);
        padded.extend_from_slice(&[0xdd; 3]);
        let mut p = pipe();
        p.start_capture();
        p.bulk_out(&padded, 7, 31).unwrap();
        assert_eq!(p.take_capture(), vec![(Endpoint::Out, raw.to_vec())]);
    }

    #[test]
    fn bulk_in_at_offset_leaves_prefix() {
        let mut p = pipe();
        p.bulk_out(&cbw(1, ScsiCommand::test_unit_ready(), 0), 0, 31)
            .unwrap();
        let mut buf = [0xaau8; 18];
        assert_eq!(p.bulk_in(&mut buf, 5, 13).unwrap(), 13);
        assert_eq!(&buf[..5], &[0xaa; 5]);
        assert_eq!(&buf[5..9], &[0x55, 0x53, 0x42, 0x53]);
    }

    #[test]
    fn short_data_phase_returns_actual_count() {
        let mut p = pipe();
        p.target_mut().configure_faults(vec![Fault::on(
            FaultTrigger::Opcode(0x12),
            FaultAction::ShortData {
                len: 20,
                honest_residue: true,
            },
        )]);
        p.bulk_out(&cbw(1, ScsiCommand::inquiry(36), 36), 0, 31)
            .unwrap();
        let mut data = [0u8; 36];
        assert_eq!(p.bulk_in(&mut data, 0, 36).unwrap(), 20);
        let mut csw = [0u8; 13];
        p.bulk_in(&mut csw, 0, 13).unwrap();
        assert_eq!(parse_csw(&csw, 1).unwrap().data_residue, 16);
    }

    #[test]
    fn stalled_out_endpoint_and_clear_halt() {
        let mut p = pipe();
        p.target_mut().configure_faults(vec![Fault::on(
            FaultTrigger::Opcode(0x2a),
            FaultAction::StallOut,
        )]);
        let w = ScsiCommand::write10(0, 1).unwrap();
        p.bulk_out(&cbw(1, w, 512), 0, 31).unwrap();
        assert_eq!(
            p.bulk_out(&[0u8; 512], 0, 512),
            Err(TransportError::Stall(Endpoint::Out))
        );
        p.control(ControlRequest::ClearHaltOut).unwrap();
        assert!(!p.is_halted(Endpoint::Out));
        let mut csw = [0u8; 13];
        p.bulk_in(&mut csw, 0, 13).unwrap();
        assert_eq!(parse_csw(&csw, 1).unwrap().status, CswStatus::Failed);
    }

    #[test]
    fn clear_halt_in() {
        let mut p = pipe();
        p.target_mut().configure_faults(vec![Fault::on(
            FaultTrigger::Opcode(0x28),
            FaultAction::StallIn,
        )]);
        p.bulk_out(&cbw(1, ScsiCommand::read10(0, 1).unwrap(), 512), 0, 31)
            .unwrap();
        let mut data = [0u8; 512];
        assert_eq!(
            p.bulk_in(&mut data, 0, 512),
            Err(TransportError::Stall(Endpoint::In))
        );
        assert_eq!(p.control(ControlRequest::ClearHaltIn).unwrap(), None);
        assert!(!p.is_halted(Endpoint::In));
    }

    #[test]
    fn lock_step_and_reset() {
        let mut p = pipe();
        let tur = cbw(1, ScsiCommand::test_unit_ready(), 0);
        p.bulk_out(&tur, 0, 31).unwrap();
        assert!(matches!(
            p.bulk_out(&cbw(2, ScsiCommand::test_unit_ready(), 0), 0, 31),
            Err(TransportError::OutOfSequence(_))
        ));
        p.control(ControlRequest::BulkOnlyReset).unwrap();
        p.bulk_out(&cbw(3, ScsiCommand::test_unit_ready(), 0), 0, 31)
            .unwrap();
        let mut csw = [0u8; 13];
        p.bulk_in(&mut csw, 0, 13).unwrap();
        assert_eq!(parse_csw(&csw, 3).unwrap().status, CswStatus::Passed);
    }

    #[test]
    fn get_max_lun_single_unit() {
        let mut p = pipe();
        assert_eq!(p.control(ControlRequest::GetMaxLun).unwrap(), Some(0));
    }

    #[test]
    fn closed_pipe_and_bad_ranges() {
        let mut p = pipe();
        assert!(matches!(
            p.bulk_out(&[0u8; 10], 5, 10),
            Err(TransportError::BufferRange { .. })
        ));
        p.close();
        assert_eq!(p.bulk_out(&[0u8; 31], 0, 31), Err(TransportError::Closed));
        assert_eq!(
            p.control(ControlRequest::GetMaxLun),
            Err(TransportError::Closed)
        );
    }

    fn run_write_read(pipe: &mut dyn BulkPipe, buf: &[u8], offset: usize) -> Vec<u8> {
        let w = ScsiCommand::write10(3, 1).unwrap();
        pipe.bulk_out(&cbw(1, w, 512), 0, 31).unwrap();
        pipe.bulk_out(buf, offset, 512).unwrap();
        let mut csw = [0u8; 13];
        pipe.bulk_in(&mut csw, 0, 13).unwrap();
        let r = ScsiCommand::read10(3, 1).unwrap();
        pipe.bulk_out(&cbw(2, r, 512), 0, 31).unwrap();
        let mut back = vec![0x5au8; offset + 512 + 4];
        assert_eq!(pipe.bulk_in(&mut back, offset, 512).unwrap(), 512);
        assert!(back[..offset].iter().all(|&b| b == 0x5a));
        assert!(back[offset + 512..].iter().all(|&b| b == 0x5a));
        pipe.bulk_in(&mut csw, 0, 13).unwrap();
        back[offset..offset + 512].to_vec()
    }

    proptest! {
        #[test]
        fn offset_transfers_are_wire_identical(
            data in proptest::collection::vec(any::<u8>(), 512),
            offset in 0usize..300,
        ) {
            let mut buf = vec![0x11u8; offset];
            buf.extend_from_slice(&data);
            buf.extend_from_slice(&[0x22; 9]);

            let mut direct = pipe();
            direct.start_capture();
            let a = run_write_read(&mut direct, &buf, offset);
            let wire_a = direct.take_capture();

            let mut shim = ZeroOffsetPipe::new(pipe());
            let b = run_write_read(&mut shim, &buf, offset);
            let mut inner = shim.into_inner();
            let mut baseline = pipe();
            baseline.start_capture();
            let c = run_write_read(&mut baseline, &data, 0);
            let wire_c = baseline.take_capture();

            prop_assert_eq!(&a, &data);
            prop_assert_eq!(&b, &data);
            prop_assert_eq!(&c, &data);
            prop_assert_eq!(wire_a, wire_c);
            prop_assert_eq!(
                inner.target_mut().backing().as_bytes(),
                baseline.target().backing().as_bytes()
            );
        }
    }
}
