//! Bulk-only transport host driver.
//!
//! [`ScsiHost`] runs CBW → data → CSW transactions over a [`BulkPipe`];
//! [`ScsiBlockDevice`] presents an initialised unit as a [`BlockDevice`].

use std::thread;
use std::time::Duration;

use log::{debug, warn};
use thiserror::Error;

use super::{
    opcode_name, CapacityResponse, CommandBlockWrapper, CommandStatusWrapper, CswStatus, Direction,
    InquiryResponse, ScsiCommand, SenseData, WireError, CBW_LEN, CSW_LEN, FIXED_SENSE_LEN,
    MAX_TRANSFER_BLOCKS_10, STANDARD_INQUIRY_LEN,
};
use crate::blockdev::{check_block_range, BlockDevice, BlockError};
use crate::transport::{BulkPipe, ControlRequest, Endpoint, TransportError};

pub const DEFAULT_READY_ATTEMPTS: u32 = 20;
pub const DEFAULT_READY_DELAY: Duration = Duration::from_millis(50);

#[derive(Debug, Error)]
pub enum ScsiError {
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error(transparent)]
    Wire(#[from] WireError),
    #[error(
        "{} failed: sense key {:#x}, asc {:#04x}, ascq {:#04x}",
        opcode_name(*opcode),
        sense.sense_key,
        sense.additional_sense_code,
        sense.additional_sense_code_qualifier
    )]
    CheckCondition { opcode: u8, sense: SenseData },
    #[error("phase error on {}; device was reset", opcode_name(*opcode))]
    PhaseError { opcode: u8 },
    #[error("protocol violation: {0}")]
    Protocol(String),
    #[error("unsupported device: peripheral qualifier {qualifier}, type {device_type}")]
    UnsupportedDevice { qualifier: u8, device_type: u8 },
    #[error("unit not ready after {attempts} attempts")]
    NotReady {
        attempts: u32,
        sense: Option<SenseData>,
    },
    #[error("reset recovery failed: {0}")]
    Unrecoverable(TransportError),
}

impl ScsiError {
    pub fn sense(&self) -> Option<&SenseData> {
        match self {
            ScsiError::CheckCondition { sense, .. } => Some(sense),
            ScsiError::NotReady { sense, .. } => sense.as_ref(),
            _ => None,
        }
    }
}

/// Host memory taking part in a data phase.
pub enum DataPhase<'a> {
    None,
    In(&'a mut [u8]),
    Out(&'a [u8]),
}

impl DataPhase<'_> {
    fn len(&self) -> usize {
        match self {
            DataPhase::None => 0,
            DataPhase::In(b) => b.len(),
            DataPhase::Out(b) => b.len(),
        }
    }

    fn direction(&self) -> Direction {
        match self {
            _ if self.len() == 0 => Direction::None,
            DataPhase::In(_) => Direction::In,
            DataPhase::Out(_) => Direction::Out,
            DataPhase::None => Direction::None,
        }
    }
}

/// A passed transaction.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Completion {
    pub csw: CommandStatusWrapper,
    /// Valid bytes in the data phase.
    pub transferred: usize,
}

pub struct ScsiHost<P> {
    pipe: P,
    next_tag: u32,
    lun: u8,
    ready_attempts: u32,
    ready_delay: Duration,
}

impl<P: BulkPipe> ScsiHost<P> {
    pub fn new(pipe: P) -> Self {
        ScsiHost {
            pipe,
            next_tag: 1,
            lun: 0,
            ready_attempts: DEFAULT_READY_ATTEMPTS,
            ready_delay: DEFAULT_READY_DELAY,
        }
    }

    pub fn set_ready_policy(&mut self, attempts: u32, delay: Duration) {
        self.ready_attempts = attempts.max(1);
        self.ready_delay = delay;
    }

    pub fn pipe(&self) -> &P {
        &self.pipe
    }

    pub fn pipe_mut(&mut self) -> &mut P {
        &mut self.pipe
    }

    pub fn into_pipe(self) -> P {
        self.pipe
    }

    /// Tag the next transaction will carry.
    pub fn next_tag(&self) -> u32 {
        self.next_tag
    }

    fn take_tag(&mut self) -> u32 {
        let tag = self.next_tag;
        self.next_tag = self.next_tag.checked_add(1).unwrap_or(1);
        tag
    }

    pub fn get_max_lun(&mut self) -> Result<u8, ScsiError> {
        match self.pipe.control(ControlRequest::GetMaxLun)? {
            Some(b) => Ok(b),
            None => Err(ScsiError::Protocol("Get Max LUN returned no data".into())),
        }
    }

    /// Bulk-only reset followed by clearing both halts.
    pub fn reset_recovery(&mut self) -> Result<(), ScsiError> {
        debug!("host: reset recovery");
        for req in [
            ControlRequest::BulkOnlyReset,
            ControlRequest::ClearHaltIn,
            ControlRequest::ClearHaltOut,
        ] {
            self.pipe.control(req).map_err(ScsiError::Unrecoverable)?;
        }
        Ok(())
    }

    fn clear_halt(&mut self, ep: Endpoint) -> Result<(), ScsiError> {
        let req = match ep {
            Endpoint::In => ControlRequest::ClearHaltIn,
            Endpoint::Out => ControlRequest::ClearHaltOut,
        };
        self.pipe.control(req)?;
        Ok(())
    }

    fn fail_with_reset(&mut self, err: ScsiError) -> ScsiError {
        match self.reset_recovery() {
            Ok(()) => err,
            Err(e) => e,
        }
    }

    fn read_csw(&mut self) -> Result<[u8; CSW_LEN], ScsiError> {
        let mut raw = [0u8; CSW_LEN];
        let mut retried = false;
        loop {
            match self.pipe.bulk_in(&mut raw, 0, CSW_LEN) {
                Ok(CSW_LEN) => return Ok(raw),
                Ok(n) => {
                    return Err(ScsiError::Protocol(format!("status wrapper of {n} bytes")));
                }
                Err(TransportError::Stall(Endpoint::In)) if !retried => {
                    self.clear_halt(Endpoint::In)?;
                    retried = true;
                }
                Err(e) => return Err(e.into()),
            }
        }
    }

    /// Runs one transaction and returns the raw CSW and the byte count of
    /// the data phase, whatever the status.
    fn exchange(
        &mut self,
        cmd: &ScsiCommand,
        mut data: DataPhase<'_>,
    ) -> Result<(CommandStatusWrapper, usize), ScsiError> {
        let len = data.len();
        let dir = data.direction();
        if dir != Direction::None && dir != cmd.direction() {
            return Err(ScsiError::Protocol(format!(
                "{} data phase direction {:?} does not match the command",
                opcode_name(cmd.opcode()),
                dir
            )));
        }
        let tag = self.take_tag();
        let cbw = CommandBlockWrapper::new(tag, len as u32, dir, self.lun, &cmd.to_bytes())?;
        let raw = cbw.to_bytes()?;
        match self.pipe.bulk_out(&raw, 0, CBW_LEN) {
            Ok(CBW_LEN) => {}
            Ok(n) => {
                let e = ScsiError::Protocol(format!("command wrapper truncated to {n} bytes"));
                return Err(self.fail_with_reset(e));
            }
            Err(TransportError::Stall(_)) => {
                let e = ScsiError::Transport(TransportError::Stall(Endpoint::Out));
                return Err(self.fail_with_reset(e));
            }
            Err(e) => return Err(e.into()),
        }

        let mut moved = 0usize;
        match &mut data {
            DataPhase::None => {}
            DataPhase::In(buf) => {
                while moved < len {
                    match self.pipe.bulk_in(buf, moved, len - moved) {
                        Ok(n) => {
                            moved += n;
                            if n == 0 || moved < len {
                                break;
                            }
                        }
                        Err(TransportError::Stall(Endpoint::In)) => {
                            debug!("host: IN stalled in data phase of tag {tag}");
                            self.clear_halt(Endpoint::In)?;
                            break;
                        }
                        Err(e) => return Err(e.into()),
                    }
                }
            }
            DataPhase::Out(buf) => {
                while moved < len {
                    match self.pipe.bulk_out(buf, moved, len - moved) {
                        Ok(0) => break,
                        Ok(n) => moved += n,
                        Err(TransportError::Stall(Endpoint::Out)) => {
                            debug!("host: OUT stalled in data phase of tag {tag}");
                            self.clear_halt(Endpoint::Out)?;
                            break;
                        }
                        Err(e) => return Err(e.into()),
                    }
                }
            }
        }

        let raw = match self.read_csw() {
            Ok(raw) => raw,
            Err(e @ ScsiError::Protocol(_)) => return Err(self.fail_with_reset(e)),
            Err(e) => return Err(e),
        };
        let csw = match super::parse_csw(&raw, tag) {
            Ok(csw) => csw,
            Err(e) => return Err(self.fail_with_reset(e.into())),
        };
        Ok((csw, moved))
    }

    /// Executes `cmd`. A failed status is answered with REQUEST SENSE and a
    /// phase error with reset recovery.
    pub fn transfer_command(
        &mut self,
        cmd: &ScsiCommand,
        data: DataPhase<'_>,
    ) -> Result<Completion, ScsiError> {
        let len = data.len();
        let out = matches!(data, DataPhase::Out(_));
        let (csw, moved) = self.exchange(cmd, data)?;
        let opcode = cmd.opcode();
        match csw.status {
            CswStatus::PhaseError => {
                warn!("host: phase error on {}", opcode_name(opcode));
                self.reset_recovery()?;
                Err(ScsiError::PhaseError { opcode })
            }
            CswStatus::Failed => {
                let sense = self.request_sense()?;
                debug!(
                    "host: {} failed with sense key {:#x}",
                    opcode_name(opcode),
                    sense.sense_key
                );
                Err(ScsiError::CheckCondition { opcode, sense })
            }
            CswStatus::Passed => {
                let residue = csw.data_residue as usize;
                if residue > len {
                    return Err(ScsiError::Protocol(format!(
                        "residue {residue} exceeds requested {len} bytes"
                    )));
                }
                if out {
                    if residue != 0 || moved != len {
                        return Err(ScsiError::Protocol(format!(
                            "device left {residue} of {len} written bytes unprocessed"
                        )));
                    }
                } else if moved != len - residue {
                    return Err(ScsiError::Protocol(format!(
                        "received {moved} of {len} bytes but status reports residue {residue}"
                    )));
                }
                Ok(Completion {
                    csw,
                    transferred: moved,
                })
            }
        }
    }

    /// Fetches fixed-format sense data for the last failed command.
    pub fn request_sense(&mut self) -> Result<SenseData, ScsiError> {
        let cmd = ScsiCommand::request_sense(FIXED_SENSE_LEN as u8);
        let mut buf = [0u8; FIXED_SENSE_LEN];
        let (csw, moved) = self.exchange(&cmd, DataPhase::In(&mut buf))?;
        match csw.status {
            CswStatus::Passed => {}
            CswStatus::PhaseError => {
                self.reset_recovery()?;
                return Err(ScsiError::PhaseError {
                    opcode: cmd.opcode(),
                });
            }
            CswStatus::Failed => {
                return Err(ScsiError::Protocol("REQUEST SENSE itself failed".into()));
            }
        }
        SenseData::parse(&buf[..moved])
            .map_err(|e| ScsiError::Protocol(format!("malformed sense data: {e}")))
    }

    pub fn inquiry(&mut self) -> Result<InquiryResponse, ScsiError> {
        let mut buf = [0u8; STANDARD_INQUIRY_LEN];
        let done = self.transfer_command(
            &ScsiCommand::inquiry(STANDARD_INQUIRY_LEN as u16),
            DataPhase::In(&mut buf),
        )?;
        Ok(InquiryResponse::parse(&buf[..done.transferred])?)
    }

    pub fn test_unit_ready(&mut self) -> Result<(), ScsiError> {
        self.transfer_command(&ScsiCommand::test_unit_ready(), DataPhase::None)
            .map(|_| ())
    }

    /// Polls TEST UNIT READY until it passes or the attempt budget runs out.
    pub fn wait_ready(&mut self) -> Result<(), ScsiError> {
        let mut last = None;
        for attempt in 1..=self.ready_attempts {
            match self.test_unit_ready() {
                Ok(()) => return Ok(()),
                Err(ScsiError::CheckCondition { sense, .. }) => {
                    debug!("host: unit not ready (attempt {attempt})");
                    last = Some(sense);
                    if attempt < self.ready_attempts {
                        thread::sleep(self.ready_delay);
                    }
                }
                Err(e) => return Err(e),
            }
        }
        Err(ScsiError::NotReady {
            attempts: self.ready_attempts,
            sense: last,
        })
    }

    pub fn read_capacity(&mut self) -> Result<CapacityResponse, ScsiError> {
        let mut buf = [0u8; 8];
        let done = self.transfer_command(&ScsiCommand::read_capacity(), DataPhase::In(&mut buf))?;
        let cap = CapacityResponse::parse(&buf[..done.transferred])?;
        if cap.block_length == 0 {
            return Err(ScsiError::Protocol("device reports 0-byte blocks".into()));
        }
        Ok(cap)
    }

    /// INQUIRY, TEST UNIT READY and READ CAPACITY, in that order.
    pub fn init(mut self) -> Result<ScsiBlockDevice<P>, ScsiError> {
        let inquiry = self.inquiry()?;
        if inquiry.peripheral_qualifier != 0 || inquiry.peripheral_device_type != 0 {
            return Err(ScsiError::UnsupportedDevice {
                qualifier: inquiry.peripheral_qualifier,
                device_type: inquiry.peripheral_device_type,
            });
        }
        self.wait_ready()?;
        let cap = self.read_capacity()?;
        debug!(
            "host: {} blocks of {} bytes",
            cap.block_count(),
            cap.block_length
        );
        Ok(ScsiBlockDevice {
            host: self,
            inquiry,
            block_size: cap.block_length,
            block_count: cap.block_count(),
        })
    }
}

/// Initialises the unit behind `pipe`.
pub fn init_device<P: BulkPipe>(pipe: P) -> Result<ScsiBlockDevice<P>, ScsiError> {
    ScsiHost::new(pipe).init()
}

/// A direct-access unit driven through READ(10) and WRITE(10).
pub struct ScsiBlockDevice<P> {
    host: ScsiHost<P>,
    inquiry: InquiryResponse,
    block_size: u32,
    block_count: u64,
}

fn backend(e: ScsiError) -> BlockError {
    BlockError::Backend {
        layer: "scsi",
        source: Box::new(e),
    }
}

impl<P: BulkPipe> ScsiBlockDevice<P> {
    pub fn inquiry(&self) -> &InquiryResponse {
        &self.inquiry
    }

    pub fn host(&self) -> &ScsiHost<P> {
        &self.host
    }

    pub fn host_mut(&mut self) -> &mut ScsiHost<P> {
        &mut self.host
    }

    pub fn into_host(self) -> ScsiHost<P> {
        self.host
    }

    fn chunks(&self, lba: u64, len: usize) -> impl Iterator<Item = (u64, u32, usize)> {
        let bs = self.block_size as usize;
        let blocks = (len / bs) as u64;
        let mut done = 0u64;
        std::iter::from_fn(move || {
            if done >= blocks {
                return None;
            }
            let n = (blocks - done).min(MAX_TRANSFER_BLOCKS_10 as u64);
            let item = (lba + done, n as u32, done as usize * bs);
            done += n;
            Some(item)
        })
    }
}

impl<P: BulkPipe> BlockDevice for ScsiBlockDevice<P> {
    fn block_size(&self) -> u32 {
        self.block_size
    }

    fn block_count(&self) -> u64 {
        self.block_count
    }

    fn read_blocks(&mut self, lba: u64, buf: &mut [u8]) -> crate::blockdev::Result<()> {
        check_block_range(self.block_size, self.block_count, lba, buf.len())?;
        let bs = self.block_size as usize;
        let chunks: Vec<_> = self.chunks(lba, buf.len()).collect();
        for (at, n, start) in chunks {
            let cmd = ScsiCommand::read10(at, n).map_err(|e| backend(e.into()))?;
            let end = start + n as usize * bs;
            let done = self
                .host
                .transfer_command(&cmd, DataPhase::In(&mut buf[start..end]))
                .map_err(backend)?;
            if done.transferred != end - start {
                return Err(backend(ScsiError::Protocol(format!(
                    "short read: {} of {} bytes",
                    done.transferred,
                    end - start
                ))));
            }
        }
        Ok(())
    }

    fn write_blocks(&mut self, lba: u64, buf: &[u8]) -> crate::blockdev::Result<()> {
        check_block_range(self.block_size, self.block_count, lba, buf.len())?;
        let bs = self.block_size as usize;
        let chunks: Vec<_> = self.chunks(lba, buf.len()).collect();
        for (at, n, start) in chunks {
            let cmd = ScsiCommand::write10(at, n).map_err(|e| backend(e.into()))?;
            let end = start + n as usize * bs;
            self.host
                .transfer_command(&cmd, DataPhase::Out(&buf[start..end]))
                .map_err(backend)?;
        }
        Ok(())
    }
}
