//! Emulated bulk-only mass-storage device.
//!
//! [`TargetEmulator`] consumes CBW bytes, serves the data phase from a
//! backing [`BlockDevice`] and answers with CSW bytes. A scripted fault plan
//! lets tests provoke failed commands, phase errors, stalls and short data
//! phases; every wire-visible step is recorded in an event log.

use log::debug;

use super::{
    sense_key, CapacityResponse, CommandBlockWrapper, CommandStatusWrapper, CswStatus, Direction,
    InquiryResponse, ScsiCommand, SenseData, WireError,
};
use crate::blockdev::BlockDevice;
use crate::transport::{ControlRequest, Endpoint, TransportError};

/// Identity and geometry reported by the emulated device.
#[derive(Debug, Clone)]
pub struct TargetConfig {
    /// Highest LUN index; 0 means a single logical unit.
    pub max_lun: u8,
    pub peripheral_qualifier: u8,
    pub peripheral_device_type: u8,
    pub removable: bool,
    pub version: u8,
    pub vendor: [u8; 8],
    pub product: [u8; 16],
    pub revision: [u8; 4],
}

impl Default for TargetConfig {
    fn default() -> Self {
        TargetConfig {
            max_lun: 0,
            peripheral_qualifier: 0,
            peripheral_device_type: 0,
            removable: true,
            // SPC-2
            version: 4,
            vendor: *b"UMSTK   ",
            product: *b"Emulated Disk   ",
            revision: *b"0100",
        }
    }
}

/// Selects the transaction a fault applies to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FaultTrigger {
    /// The n-th CBW (1-based) received after the plan was configured.
    Command(u64),
    /// The next CBW carrying this operation code.
    Opcode(u8),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FaultAction {
    /// Fail the command (status 1) and report this sense data.
    Fail(SenseData),
    /// Answer with status 2 without executing the command.
    PhaseError,
    /// Halt the IN endpoint instead of sending the data phase.
    StallIn,
    /// Halt the OUT endpoint instead of accepting the data phase.
    StallOut,
    /// Send only `len` bytes of an IN data phase. With `honest_residue`
    /// the CSW reports the shortfall, otherwise it claims residue 0.
    ShortData { len: u32, honest_residue: bool },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fault {
    Command {
        trigger: FaultTrigger,
        action: FaultAction,
    },
    /// Reject the next class-specific request of this kind.
    RejectControl(ControlRequest),
}

impl Fault {
    pub fn on(trigger: FaultTrigger, action: FaultAction) -> Self {
        Fault::Command { trigger, action }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TargetEvent {
    CbwReceived { tag: u32, opcode: Option<u8> },
    DataIn { len: usize },
    DataOut { len: usize },
    CswSent { tag: u32, status: u8, residue: u32 },
    Stalled(Endpoint),
    Control(ControlRequest),
    ControlRejected(ControlRequest),
}

/// A CBW the target has accepted but not yet completed.
#[derive(Debug, Clone)]
pub struct PendingCommand {
    raw_tag: u32,
    cbw: Option<CommandBlockWrapper>,
    action: Option<FaultAction>,
}

impl PendingCommand {
    pub fn cbw(&self) -> Option<&CommandBlockWrapper> {
        self.cbw.as_ref()
    }

    /// Bytes the host is expected to send before the CSW.
    pub fn host_data_len(&self) -> usize {
        match &self.cbw {
            Some(cbw) if cbw.direction() == Direction::Out => cbw.data_transfer_length as usize,
            _ => 0,
        }
    }

    /// The OUT endpoint halts instead of taking the data phase.
    pub fn stalls_out(&self) -> bool {
        self.action == Some(FaultAction::StallOut) && self.host_data_len() > 0
    }
}

/// Device side of one transaction.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Transaction {
    pub data: Option<Vec<u8>>,
    pub csw: [u8; 13],
    /// The IN endpoint halts in place of the data phase.
    pub stall_in: bool,
}

struct Outcome {
    data: Option<Vec<u8>>,
    status: CswStatus,
    moved: u32,
    stall_in: bool,
}

impl Outcome {
    fn failed() -> Self {
        Outcome {
            data: None,
            status: CswStatus::Failed,
            moved: 0,
            stall_in: false,
        }
    }

    fn phase_error() -> Self {
        Outcome {
            status: CswStatus::PhaseError,
            ..Outcome::failed()
        }
    }

    fn passed(data: Option<Vec<u8>>, moved: u32) -> Self {
        Outcome {
            data,
            status: CswStatus::Passed,
            moved,
            stall_in: false,
        }
    }
}

pub struct TargetEmulator<D> {
    backing: D,
    config: TargetConfig,
    pending_sense: Vec<Option<SenseData>>,
    faults: Vec<Fault>,
    commands_seen: u64,
    plan_base: u64,
    events: Vec<TargetEvent>,
}

impl<D: BlockDevice> TargetEmulator<D> {
    pub fn new(backing: D) -> Self {
        Self::with_config(backing, TargetConfig::default())
    }

    pub fn with_config(backing: D, config: TargetConfig) -> Self {
        let luns = config.max_lun as usize + 1;
        TargetEmulator {
            backing,
            config,
            pending_sense: vec![None; luns],
            faults: Vec::new(),
            commands_seen: 0,
            plan_base: 0,
            events: Vec::new(),
        }
    }

    pub fn config(&self) -> &TargetConfig {
        &self.config
    }

    pub fn backing(&self) -> &D {
        &self.backing
    }

    pub fn backing_mut(&mut self) -> &mut D {
        &mut self.backing
    }

    pub fn into_backing(self) -> D {
        self.backing
    }

    /// Replaces the fault plan. Command-count triggers are counted from
    /// this call; every fault fires at most once.
    pub fn configure_faults(&mut self, plan: Vec<Fault>) {
        self.faults = plan;
        self.plan_base = self.commands_seen;
    }

    pub fn remaining_faults(&self) -> &[Fault] {
        &self.faults
    }

    pub fn events(&self) -> &[TargetEvent] {
        &self.events
    }

    pub fn take_events(&mut self) -> Vec<TargetEvent> {
        std::mem::take(&mut self.events)
    }

    pub(crate) fn record(&mut self, event: TargetEvent) {
        self.events.push(event);
    }

    pub fn pending_sense(&self, lun: u8) -> Option<&SenseData> {
        self.pending_sense
            .get(lun as usize)
            .and_then(Option::as_ref)
    }

    /// Runs a whole transaction: CBW, optional host data, response.
    pub fn process_transaction(
        &mut self,
        cbw_bytes: &[u8],
        host_data: Option<&[u8]>,
    ) -> Transaction {
        let pending = self.begin(cbw_bytes);
        self.complete(pending, host_data)
    }

    /// Accepts a CBW and resolves which scripted fault, if any, applies.
    pub fn begin(&mut self, cbw_bytes: &[u8]) -> PendingCommand {
        self.commands_seen += 1;
        let raw_tag = if cbw_bytes.len() >= 8 {
            u32::from_le_bytes(cbw_bytes[4..8].try_into().unwrap())
        } else {
            0
        };
        let cbw = match CommandBlockWrapper::parse(cbw_bytes) {
            Ok(cbw) => Some(cbw),
            Err(e) => {
                debug!("target: rejecting CBW ({e}), {} bytes", cbw_bytes.len());
                None
            }
        };
        let opcode = cbw.as_ref().map(|c| c.cb[0]);
        self.record(TargetEvent::CbwReceived {
            tag: raw_tag,
            opcode,
        });
        let ordinal = self.commands_seen - self.plan_base;
        let action = self.take_fault(ordinal, opcode);
        PendingCommand {
            raw_tag,
            cbw,
            action,
        }
    }

    fn take_fault(&mut self, ordinal: u64, opcode: Option<u8>) -> Option<FaultAction> {
        let idx = self.faults.iter().position(|f| match f {
            Fault::Command {
                trigger: FaultTrigger::Command(n),
                ..
            } => *n == ordinal,
            Fault::Command {
                trigger: FaultTrigger::Opcode(op),
                ..
            } => Some(*op) == opcode,
            Fault::RejectControl(_) => false,
        })?;
        match self.faults.remove(idx) {
            Fault::Command { action, .. } => Some(action),
            Fault::RejectControl(_) => None,
        }
    }

    /// Finishes a transaction begun with [`begin`](Self::begin).
    pub fn complete(&mut self, pending: PendingCommand, host_data: Option<&[u8]>) -> Transaction {
        let expected = pending
            .cbw
            .as_ref()
            .map(|c| c.data_transfer_length)
            .unwrap_or(0);
        let outcome = match &pending.cbw {
            None => Outcome::phase_error(),
            Some(cbw) => self.execute(cbw, pending.action, host_data),
        };
        if let Some(d) = &outcome.data {
            self.record(TargetEvent::DataIn { len: d.len() });
        }
        if outcome.stall_in {
            self.record(TargetEvent::Stalled(Endpoint::In));
        }
        let residue = match outcome.status {
            CswStatus::PhaseError => 0,
            _ => expected.saturating_sub(outcome.moved),
        };
        let csw = CommandStatusWrapper {
            tag: pending.raw_tag,
            data_residue: residue,
            status: outcome.status,
        };
        self.record(TargetEvent::CswSent {
            tag: csw.tag,
            status: csw.status as u8,
            residue,
        });
        Transaction {
            data: outcome.data,
            csw: csw.to_bytes(),
            stall_in: outcome.stall_in,
        }
    }

    fn fail(&mut self, lun: u8, sense: SenseData) -> Outcome {
        if let Some(slot) = self.pending_sense.get_mut(lun as usize) {
            *slot = Some(sense);
        }
        Outcome::failed()
    }

    fn execute(
        &mut self,
        cbw: &CommandBlockWrapper,
        action: Option<FaultAction>,
        host_data: Option<&[u8]>,
    ) -> Outcome {
        let lun = cbw.lun;
        let aborted = SenseData::new(sense_key::ABORTED_COMMAND, 0, 0);
        match action {
            Some(FaultAction::PhaseError) => return Outcome::phase_error(),
            Some(FaultAction::Fail(sense)) => return self.fail(lun, sense),
            Some(FaultAction::StallOut) if cbw.direction() == Direction::Out => {
                self.record(TargetEvent::Stalled(Endpoint::Out));
                return self.fail(lun, aborted);
            }
            Some(FaultAction::StallIn) if cbw.direction() == Direction::In => {
                let mut o = self.fail(lun, aborted);
                o.stall_in = true;
                return o;
            }
            _ => {}
        }

        if lun > self.config.max_lun {
            return self.fail(lun, SenseData::new(sense_key::ILLEGAL_REQUEST, 0x25, 0));
        }
        let command = match ScsiCommand::parse(cbw.command()) {
            Ok(c) => c,
            Err(WireError::UnknownOpcode(_)) => {
                return self.fail(lun, SenseData::new(sense_key::ILLEGAL_REQUEST, 0x20, 0));
            }
            Err(_) => {
                return self.fail(lun, SenseData::new(sense_key::ILLEGAL_REQUEST, 0x24, 0));
            }
        };

        let block_size = self.backing.block_size();
        let implied = command.transfer_bytes(block_size);
        // Only the cases where host and device agree on direction and the
        // host allows at least the device's length are served.
        if implied > 0
            && (cbw.direction() != command.direction() || cbw.data_transfer_length < implied)
        {
            debug!(
                "target: CBW expects {} bytes {:?}, command implies {implied} {:?}",
                cbw.data_transfer_length,
                cbw.direction(),
                command.direction()
            );
            return Outcome::phase_error();
        }
        if command.direction() == Direction::Out && cbw.data_transfer_length != implied {
            return Outcome::phase_error();
        }

        let mut outcome = match command {
            ScsiCommand::Inquiry {
                evpd,
                allocation_length,
                ..
            } => {
                if evpd {
                    return self.fail(lun, SenseData::new(sense_key::ILLEGAL_REQUEST, 0x24, 0));
                }
                let data = self.inquiry_data();
                let n = data.len().min(allocation_length as usize);
                Outcome::passed(Some(data[..n].to_vec()), n as u32)
            }
            ScsiCommand::TestUnitReady { .. } => Outcome::passed(None, 0),
            ScsiCommand::ReadCapacity10 { .. } => {
                let last_lba = self
                    .backing
                    .block_count()
                    .saturating_sub(1)
                    .min(u32::MAX as u64);
                let cap = CapacityResponse {
                    last_lba: last_lba as u32,
                    block_length: block_size,
                };
                Outcome::passed(Some(cap.to_bytes().to_vec()), 8)
            }
            ScsiCommand::Read10 {
                lba,
                transfer_length,
                ..
            } => {
                if lba as u64 + transfer_length as u64 > self.backing.block_count() {
                    return self.fail(lun, SenseData::new(sense_key::ILLEGAL_REQUEST, 0x21, 0));
                }
                if transfer_length == 0 {
                    Outcome::passed(None, 0)
                } else {
                    let mut buf = vec![0u8; implied as usize];
                    if let Err(e) = self.backing.read_blocks(lba as u64, &mut buf) {
                        debug!("target: backing read failed: {e}");
                        return self.fail(lun, SenseData::new(sense_key::MEDIUM_ERROR, 0x11, 0));
                    }
                    Outcome::passed(Some(buf), implied)
                }
            }
            ScsiCommand::Write10 {
                lba,
                transfer_length,
                ..
            } => {
                if lba as u64 + transfer_length as u64 > self.backing.block_count() {
                    return self.fail(lun, SenseData::new(sense_key::ILLEGAL_REQUEST, 0x21, 0));
                }
                let data = host_data.unwrap_or(&[]);
                if data.len() != implied as usize {
                    return Outcome::phase_error();
                }
                self.record(TargetEvent::DataOut { len: data.len() });
                if transfer_length > 0 {
                    if let Err(e) = self.backing.write_blocks(lba as u64, data) {
                        debug!("target: backing write failed: {e}");
                        return self.fail(lun, SenseData::new(sense_key::MEDIUM_ERROR, 0x0c, 0));
                    }
                }
                Outcome::passed(None, implied)
            }
            ScsiCommand::RequestSense {
                allocation_length, ..
            } => {
                let sense = self.pending_sense[lun as usize]
                    .take()
                    .unwrap_or_else(SenseData::no_sense);
                let bytes = sense.to_bytes();
                let n = bytes.len().min(allocation_length as usize);
                Outcome::passed(Some(bytes[..n].to_vec()), n as u32)
            }
        };

        if let Some(FaultAction::ShortData {
            len,
            honest_residue,
        }) = action
        {
            if let Some(data) = outcome.data.as_mut() {
                data.truncate(len as usize);
                outcome.moved = if honest_residue {
                    data.len() as u32
                } else {
                    cbw.data_transfer_length
                };
            }
        }
        self.pending_sense[lun as usize] = None;
        outcome
    }

    fn inquiry_data(&self) -> [u8; super::STANDARD_INQUIRY_LEN] {
        let c = &self.config;
        InquiryResponse {
            peripheral_qualifier: c.peripheral_qualifier,
            peripheral_device_type: c.peripheral_device_type,
            removable: c.removable,
            version: c.version,
            response_data_format: 2,
            additional_length: (super::STANDARD_INQUIRY_LEN - 5) as u8,
            vendor: c.vendor,
            product: c.product,
            revision: c.revision,
        }
        .to_bytes()
    }

    /// Handles a class-specific control request.
    pub fn handle_control(
        &mut self,
        request: ControlRequest,
    ) -> Result<Option<u8>, TransportError> {
        if let Some(idx) = self
            .faults
            .iter()
            .position(|f| *f == Fault::RejectControl(request))
        {
            self.faults.remove(idx);
            self.record(TargetEvent::ControlRejected(request));
            return Err(TransportError::ControlFailed(request));
        }
        self.record(TargetEvent::Control(request));
        Ok(match request {
            ControlRequest::GetMaxLun => Some(self.config.max_lun),
            _ => None,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blockdev::MemDevice;
    use crate::scsi::{parse_csw, CommandBlockWrapper, Direction};

    fn target() -> TargetEmulator<MemDevice> {
        TargetEmulator::new(MemDevice::new(512, 16384).unwrap())
    }

    fn cbw(tag: u32, cmd: ScsiCommand, len: u32) -> [u8; 31] {
        CommandBlockWrapper::new(tag, len, cmd.direction(), 0, &cmd.to_bytes())
            .unwrap()
            .to_bytes()
            .unwrap()
    }

    #[test]
    fn inquiry_standard_data() {
        let mut t = target();
        let tx = t.process_transaction(&cbw(1, ScsiCommand::inquiry(36), 36), None);
        let data = tx.data.unwrap();
        assert_eq!(data.len(), 36);
        assert_eq!(data[0], 0x00);
        assert_eq!(data[1], 0x80);
        assert_eq!(data[3] & 0x0f, 0x02);
        assert_eq!(&data[8..16], b"UMSTK   ");
        let csw = parse_csw(&tx.csw, 1).unwrap();
        assert_eq!(csw.status, CswStatus::Passed);
        assert_eq!(csw.data_residue, 0);
    }

    #[test]
    fn read_capacity_reports_geometry() {
        let mut t = target();
        let tx = t.process_transaction(&cbw(2, ScsiCommand::read_capacity(), 8), None);
        assert_eq!(tx.data.unwrap(), vec![0, 0, 0x3f, 0xff, 0, 0, 0x02, 0]);
    }

    #[test]
    fn out_of_range_read_sets_illegal_request() {
        let mut t = target();
        let cmd = ScsiCommand::read10(16384, 1).unwrap();
        let tx = t.process_transaction(&cbw(3, cmd, 512), None);
        let csw = parse_csw(&tx.csw, 3).unwrap();
        assert_eq!(csw.status, CswStatus::Failed);
        assert_eq!(csw.data_residue, 512);
        assert!(tx.data.is_none());

        let tx = t.process_transaction(&cbw(4, ScsiCommand::request_sense(18), 18), None);
        let sense = SenseData::parse(&tx.data.unwrap()).unwrap();
        assert_eq!(sense.sense_key, sense_key::ILLEGAL_REQUEST);
        assert_eq!(sense.response_code, 0x70);

        // Cleared once served.
        let tx = t.process_transaction(&cbw(5, ScsiCommand::request_sense(18), 18), None);
        assert_eq!(SenseData::parse(&tx.data.unwrap()).unwrap().sense_key, 0);
    }

    #[test]
    fn write_then_read_conserves_data() {
        let mut t = target();
        let payload: Vec<u8> = (0..1024).map(|i| (i * 7) as u8).collect();
        let w = ScsiCommand::write10(100, 2).unwrap();
        let tx = t.process_transaction(&cbw(1, w, 1024), Some(&payload));
        assert_eq!(parse_csw(&tx.csw, 1).unwrap().status, CswStatus::Passed);
        let r = ScsiCommand::read10(100, 2).unwrap();
        let tx = t.process_transaction(&cbw(2, r, 1024), None);
        assert_eq!(tx.data.unwrap(), payload);
    }

    #[test]
    fn unknown_opcode_and_bad_signature() {
        let mut t = target();
        let raw = CommandBlockWrapper::new(9, 0, Direction::None, 0, &[0x1b, 0, 0, 0, 1, 0])
            .unwrap()
            .to_bytes()
            .unwrap();
        let tx = t.process_transaction(&raw, None);
        assert_eq!(parse_csw(&tx.csw, 9).unwrap().status, CswStatus::Failed);
        assert_eq!(
            t.pending_sense(0).unwrap().sense_key,
            sense_key::ILLEGAL_REQUEST
        );

        let mut bad = cbw(10, ScsiCommand::test_unit_ready(), 0);
        bad[0] = 0;
        let tx = t.process_transaction(&bad, None);
        assert_eq!(
            parse_csw(&tx.csw, 10).unwrap().status,
            CswStatus::PhaseError
        );
    }

    #[test]
    fn request_sense_honours_allocation_length() {
        let mut t = target();
        let tx = t.process_transaction(&cbw(1, ScsiCommand::request_sense(8), 8), None);
        assert_eq!(tx.data.unwrap().len(), 8);
        let tx = t.process_transaction(&cbw(2, ScsiCommand::request_sense(252), 252), None);
        assert_eq!(tx.data.unwrap().len(), 18);
        assert_eq!(parse_csw(&tx.csw, 2).unwrap().data_residue, 252 - 18);
    }

    #[test]
    fn lun_beyond_max_fails() {
        let mut t = target();
        let cmd = ScsiCommand::test_unit_ready();
        let raw = CommandBlockWrapper::new(1, 0, Direction::None, 1, &cmd.to_bytes())
            .unwrap()
            .to_bytes()
            .unwrap();
        let tx = t.process_transaction(&raw, None);
        assert_eq!(parse_csw(&tx.csw, 1).unwrap().status, CswStatus::Failed);
    }

    #[test]
    fn faults_fire_once_on_their_command() {
        let mut t = target();
        t.configure_faults(vec![Fault::on(
            FaultTrigger::Command(3),
            FaultAction::PhaseError,
        )]);
        let tur = ScsiCommand::test_unit_ready();
        let statuses: Vec<CswStatus> = (1..=5)
            .map(|tag| {
                let tx = t.process_transaction(&cbw(tag, tur, 0), None);
                parse_csw(&tx.csw, tag).unwrap().status
            })
            .collect();
        assert_eq!(
            statuses,
            vec![
                CswStatus::Passed,
                CswStatus::Passed,
                CswStatus::PhaseError,
                CswStatus::Passed,
                CswStatus::Passed
            ]
        );
        assert!(t.remaining_faults().is_empty());
    }

    #[test]
    fn empty_plan_is_nominal() {
        let mut t = target();
        t.configure_faults(vec![]);
        let tx = t.process_transaction(&cbw(1, ScsiCommand::test_unit_ready(), 0), None);
        assert_eq!(parse_csw(&tx.csw, 1).unwrap().status, CswStatus::Passed);
    }

    #[test]
    fn mismatched_direction_is_phase_error() {
        let mut t = target();
        let cmd = ScsiCommand::read10(0, 1).unwrap();
        let raw = CommandBlockWrapper::new(1, 512, Direction::Out, 0, &cmd.to_bytes())
            .unwrap()
            .to_bytes()
            .unwrap();
        let tx = t.process_transaction(&raw, Some(&[0; 512]));
        assert_eq!(parse_csw(&tx.csw, 1).unwrap().status, CswStatus::PhaseError);
    }

    #[test]
    fn get_max_lun_and_rejected_control() {
        let mut t = target();
        assert_eq!(
            t.handle_control(ControlRequest::GetMaxLun).unwrap(),
            Some(0)
        );
        t.configure_faults(vec![Fault::RejectControl(ControlRequest::BulkOnlyReset)]);
        assert!(t.handle_control(ControlRequest::BulkOnlyReset).is_err());
        assert!(t.handle_control(ControlRequest::BulkOnlyReset).is_ok());
    }
}
