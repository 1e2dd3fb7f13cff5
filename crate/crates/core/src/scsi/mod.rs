//! Bulk-only transport framing and the SCSI transparent command set.
//!
//! Wrapper records (CBW/CSW) are little-endian; fields inside SCSI command
//! blocks and their response data are big-endian.

pub mod host;
pub mod target;

use thiserror::Error;

pub use host::{ScsiBlockDevice, ScsiError, ScsiHost};
pub use target::{Fault, FaultAction, FaultTrigger, TargetConfig, TargetEmulator, TargetEvent};

pub const CBW_SIGNATURE: u32 = 0x4342_5355;
pub const CSW_SIGNATURE: u32 = 0x5342_5355;
pub const CBW_LEN: usize = 31;
pub const CSW_LEN: usize = 13;

/// bmCBWFlags bit 7: data flows device to host.
pub const CBW_FLAG_DATA_IN: u8 = 0x80;

pub mod opcode {
    pub const TEST_UNIT_READY: u8 = 0x00;
    pub const REQUEST_SENSE: u8 = 0x03;
    pub const INQUIRY: u8 = 0x12;
    pub const READ_CAPACITY_10: u8 = 0x25;
    pub const READ_10: u8 = 0x28;
    pub const WRITE_10: u8 = 0x2a;
}

pub mod sense_key {
    pub const NO_SENSE: u8 = 0x0;
    pub const NOT_READY: u8 = 0x2;
    pub const MEDIUM_ERROR: u8 = 0x3;
    pub const HARDWARE_ERROR: u8 = 0x4;
    pub const ILLEGAL_REQUEST: u8 = 0x5;
    pub const UNIT_ATTENTION: u8 = 0x6;
    pub const ABORTED_COMMAND: u8 = 0xb;
}

pub fn opcode_name(op: u8) -> &'static str {
    match op {
        opcode::INQUIRY => "INQUIRY",
        opcode::TEST_UNIT_READY => "TEST UNIT READY",
        opcode::READ_CAPACITY_10 => "READ CAPACITY(10)",
        opcode::READ_10 => "READ(10)",
        opcode::WRITE_10 => "WRITE(10)",
        opcode::REQUEST_SENSE => "REQUEST SENSE",
        _ => "unknown",
    }
}

/// Fixed-format sense data, current error.
pub const SENSE_RESPONSE_CODE_CURRENT: u8 = 0x70;
/// Bytes of fixed sense data carrying defined fields.
pub const FIXED_SENSE_LEN: usize = 18;
pub const STANDARD_INQUIRY_LEN: usize = 36;
/// Largest transfer length a 10-byte READ/WRITE can express.
pub const MAX_TRANSFER_BLOCKS_10: u32 = u16::MAX as u32;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum WireError {
    #[error("expected {expected} bytes, got {actual}")]
    Length { expected: usize, actual: usize },
    #[error("bad signature {0:#010x}")]
    BadSignature(u32),
    #[error("CSW tag {actual:#x} does not match CBW tag {expected:#x}")]
    TagMismatch { expected: u32, actual: u32 },
    #[error("invalid CSW status {0}")]
    InvalidStatus(u8),
    #[error("command block length {0} outside 1..=16")]
    CommandLength(usize),
    #[error("LUN {0} does not fit in 4 bits")]
    Lun(u8),
    #[error("flags must be zero when there is no data phase")]
    FlagsWithoutData,
    #[error("unsupported operation code {0:#04x}")]
    UnknownOpcode(u8),
    #[error("{field} value {value} out of range")]
    FieldRange { field: &'static str, value: u64 },
    #[error("malformed {0}")]
    Malformed(&'static str),
}

fn expect_len(buf: &[u8], expected: usize) -> Result<(), WireError> {
    if buf.len() != expected {
        return Err(WireError::Length {
            expected,
            actual: buf.len(),
        });
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    None,
    /// Host to device.
    Out,
    /// Device to host.
    In,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CommandBlockWrapper {
    pub tag: u32,
    pub data_transfer_length: u32,
    pub flags: u8,
    pub lun: u8,
    pub cb_length: u8,
    pub cb: [u8; 16],
}

impl CommandBlockWrapper {
    pub fn new(
        tag: u32,
        data_transfer_length: u32,
        direction: Direction,
        lun: u8,
        command: &[u8],
    ) -> Result<Self, WireError> {
        if command.is_empty() || command.len() > 16 {
            return Err(WireError::CommandLength(command.len()));
        }
        if lun > 0x0f {
            return Err(WireError::Lun(lun));
        }
        let flags = match direction {
            Direction::In if data_transfer_length > 0 => CBW_FLAG_DATA_IN,
            _ => 0,
        };
        let mut cb = [0u8; 16];
        cb[..command.len()].copy_from_slice(command);
        Ok(CommandBlockWrapper {
            tag,
            data_transfer_length,
            flags,
            lun,
            cb_length: command.len() as u8,
            cb,
        })
    }

    pub fn direction(&self) -> Direction {
        if self.data_transfer_length == 0 {
            Direction::None
        } else if self.flags & CBW_FLAG_DATA_IN != 0 {
            Direction::In
        } else {
            Direction::Out
        }
    }

    pub fn command(&self) -> &[u8] {
        &self.cb[..self.cb_length as usize]
    }

    pub fn to_bytes(&self) -> Result<[u8; CBW_LEN], WireError> {
        if self.cb_length == 0 || self.cb_length > 16 {
            return Err(WireError::CommandLength(self.cb_length as usize));
        }
        if self.lun > 0x0f {
            return Err(WireError::Lun(self.lun));
        }
        if self.data_transfer_length == 0 && self.flags != 0 {
            return Err(WireError::FlagsWithoutData);
        }
        let mut out = [0u8; CBW_LEN];
        out[0..4].copy_from_slice(&CBW_SIGNATURE.to_le_bytes());
        out[4..8].copy_from_slice(&self.tag.to_le_bytes());
        out[8..12].copy_from_slice(&self.data_transfer_length.to_le_bytes());
        out[12] = self.flags;
        out[13] = self.lun & 0x0f;
        out[14] = self.cb_length & 0x1f;
        out[15..31].copy_from_slice(&self.cb);
        Ok(out)
    }

    pub fn parse(raw: &[u8]) -> Result<Self, WireError> {
        expect_len(raw, CBW_LEN)?;
        let sig = u32::from_le_bytes(raw[0..4].try_into().unwrap());
        if sig != CBW_SIGNATURE {
            return Err(WireError::BadSignature(sig));
        }
        let cb_length = raw[14] & 0x1f;
        if cb_length == 0 || cb_length > 16 {
            return Err(WireError::CommandLength(cb_length as usize));
        }
        Ok(CommandBlockWrapper {
            tag: u32::from_le_bytes(raw[4..8].try_into().unwrap()),
            data_transfer_length: u32::from_le_bytes(raw[8..12].try_into().unwrap()),
            flags: raw[12],
            lun: raw[13] & 0x0f,
            cb_length,
            cb: raw[15..31].try_into().unwrap(),
        })
    }
}

/// `serialize_cbw` as a free function.
pub fn serialize_cbw(cbw: &CommandBlockWrapper) -> Result<[u8; CBW_LEN], WireError> {
    cbw.to_bytes()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CswStatus {
    Passed = 0,
    Failed = 1,
    PhaseError = 2,
}

impl TryFrom<u8> for CswStatus {
    type Error = WireError;

    fn try_from(v: u8) -> Result<Self, WireError> {
        match v {
            0 => Ok(CswStatus::Passed),
            1 => Ok(CswStatus::Failed),
            2 => Ok(CswStatus::PhaseError),
            other => Err(WireError::InvalidStatus(other)),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CommandStatusWrapper {
    pub tag: u32,
    pub data_residue: u32,
    pub status: CswStatus,
}

impl CommandStatusWrapper {
    pub fn to_bytes(&self) -> [u8; CSW_LEN] {
        let mut out = [0u8; CSW_LEN];
        out[0..4].copy_from_slice(&CSW_SIGNATURE.to_le_bytes());
        out[4..8].copy_from_slice(&self.tag.to_le_bytes());
        out[8..12].copy_from_slice(&self.data_residue.to_le_bytes());
        out[12] = self.status as u8;
        out
    }
}

/// Decodes a CSW and checks it answers the CBW tagged `expected_tag`.
pub fn parse_csw(raw: &[u8], expected_tag: u32) -> Result<CommandStatusWrapper, WireError> {
    expect_len(raw, CSW_LEN)?;
    let sig = u32::from_le_bytes(raw[0..4].try_into().unwrap());
    if sig != CSW_SIGNATURE {
        return Err(WireError::BadSignature(sig));
    }
    let status = CswStatus::try_from(raw[12])?;
    let tag = u32::from_le_bytes(raw[4..8].try_into().unwrap());
    if tag != expected_tag {
        return Err(WireError::TagMismatch {
            expected: expected_tag,
            actual: tag,
        });
    }
    Ok(CommandStatusWrapper {
        tag,
        data_residue: u32::from_le_bytes(raw[8..12].try_into().unwrap()),
        status,
    })
}

/// The six commands of the transparent command set this stack speaks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScsiCommand {
    Inquiry {
        evpd: bool,
        page_code: u8,
        allocation_length: u16,
        control: u8,
    },
    TestUnitReady {
        control: u8,
    },
    ReadCapacity10 {
        pmi: bool,
        lba: u32,
        control: u8,
    },
    Read10 {
        lba: u32,
        transfer_length: u16,
        control: u8,
    },
    Write10 {
        lba: u32,
        transfer_length: u16,
        control: u8,
    },
    RequestSense {
        desc: bool,
        allocation_length: u8,
        control: u8,
    },
}

impl ScsiCommand {
    pub fn inquiry(allocation_length: u16) -> Self {
        ScsiCommand::Inquiry {
            evpd: false,
            page_code: 0,
            allocation_length,
            control: 0,
        }
    }

    pub fn test_unit_ready() -> Self {
        ScsiCommand::TestUnitReady { control: 0 }
    }

    pub fn read_capacity() -> Self {
        ScsiCommand::ReadCapacity10 {
            pmi: false,
            lba: 0,
            control: 0,
        }
    }

    pub fn read10(lba: u64, blocks: u32) -> Result<Self, WireError> {
        let (lba, transfer_length) = rw10_fields(lba, blocks)?;
        Ok(ScsiCommand::Read10 {
            lba,
            transfer_length,
            control: 0,
        })
    }

    pub fn write10(lba: u64, blocks: u32) -> Result<Self, WireError> {
        let (lba, transfer_length) = rw10_fields(lba, blocks)?;
        Ok(ScsiCommand::Write10 {
            lba,
            transfer_length,
            control: 0,
        })
    }

    pub fn request_sense(allocation_length: u8) -> Self {
        ScsiCommand::RequestSense {
            desc: false,
            allocation_length,
            control: 0,
        }
    }

    pub fn opcode(&self) -> u8 {
        match self {
            ScsiCommand::Inquiry { .. } => opcode::INQUIRY,
            ScsiCommand::TestUnitReady { .. } => opcode::TEST_UNIT_READY,
            ScsiCommand::ReadCapacity10 { .. } => opcode::READ_CAPACITY_10,
            ScsiCommand::Read10 { .. } => opcode::READ_10,
            ScsiCommand::Write10 { .. } => opcode::WRITE_10,
            ScsiCommand::RequestSense { .. } => opcode::REQUEST_SENSE,
        }
    }

    pub fn direction(&self) -> Direction {
        match self {
            ScsiCommand::TestUnitReady { .. } => Direction::None,
            ScsiCommand::Write10 { .. } => Direction::Out,
            _ => Direction::In,
        }
    }

    /// Data-phase length implied by the command.
    pub fn transfer_bytes(&self, block_size: u32) -> u32 {
        match *self {
            ScsiCommand::Inquiry {
                allocation_length, ..
            } => allocation_length as u32,
            ScsiCommand::TestUnitReady { .. } => 0,
            ScsiCommand::ReadCapacity10 { .. } => 8,
            ScsiCommand::Read10 {
                transfer_length, ..
            }
            | ScsiCommand::Write10 {
                transfer_length, ..
            } => transfer_length as u32 * block_size,
            ScsiCommand::RequestSense {
                allocation_length, ..
            } => allocation_length as u32,
        }
    }

    /// Serializes the command block: 6 bytes for INQUIRY, TEST UNIT READY
    /// and REQUEST SENSE, 10 bytes otherwise.
    pub fn to_bytes(&self) -> Vec<u8> {
        match *self {
            ScsiCommand::Inquiry {
                evpd,
                page_code,
                allocation_length,
                control,
            } => {
                let len = allocation_length.to_be_bytes();
                vec![
                    opcode::INQUIRY,
                    evpd as u8,
                    page_code,
                    len[0],
                    len[1],
                    control,
                ]
            }
            ScsiCommand::TestUnitReady { control } => {
                vec![opcode::TEST_UNIT_READY, 0, 0, 0, 0, control]
            }
            ScsiCommand::ReadCapacity10 { pmi, lba, control } => {
                let mut v = vec![opcode::READ_CAPACITY_10, 0];
                v.extend_from_slice(&lba.to_be_bytes());
                v.extend_from_slice(&[0, 0, pmi as u8, control]);
                v
            }
            ScsiCommand::Read10 {
                lba,
                transfer_length,
                control,
            } => rw10_bytes(opcode::READ_10, lba, transfer_length, control),
            ScsiCommand::Write10 {
                lba,
                transfer_length,
                control,
            } => rw10_bytes(opcode::WRITE_10, lba, transfer_length, control),
            ScsiCommand::RequestSense {
                desc,
                allocation_length,
                control,
            } => vec![
                opcode::REQUEST_SENSE,
                desc as u8,
                0,
                0,
                allocation_length,
                control,
            ],
        }
    }

    pub fn parse(cb: &[u8]) -> Result<Self, WireError> {
        let op = *cb
            .first()
            .ok_or(WireError::Malformed("empty command block"))?;
        let need = match op {
            opcode::INQUIRY | opcode::TEST_UNIT_READY | opcode::REQUEST_SENSE => 6,
            opcode::READ_CAPACITY_10 | opcode::READ_10 | opcode::WRITE_10 => 10,
            other => return Err(WireError::UnknownOpcode(other)),
        };
        if cb.len() < need {
            return Err(WireError::Length {
                expected: need,
                actual: cb.len(),
            });
        }
        let be32 = |i: usize| u32::from_be_bytes(cb[i..i + 4].try_into().unwrap());
        let be16 = |i: usize| u16::from_be_bytes(cb[i..i + 2].try_into().unwrap());
        Ok(match op {
            opcode::INQUIRY => ScsiCommand::Inquiry {
                evpd: cb[1] & 1 != 0,
                page_code: cb[2],
                allocation_length: be16(3),
                control: cb[5],
            },
            opcode::TEST_UNIT_READY => ScsiCommand::TestUnitReady { control: cb[5] },
            opcode::REQUEST_SENSE => ScsiCommand::RequestSense {
                desc: cb[1] & 1 != 0,
                allocation_length: cb[4],
                control: cb[5],
            },
            opcode::READ_CAPACITY_10 => ScsiCommand::ReadCapacity10 {
                pmi: cb[8] & 1 != 0,
                lba: be32(2),
                control: cb[9],
            },
            opcode::READ_10 => ScsiCommand::Read10 {
                lba: be32(2),
                transfer_length: be16(7),
                control: cb[9],
            },
            _ => ScsiCommand::Write10 {
                lba: be32(2),
                transfer_length: be16(7),
                control: cb[9],
            },
        })
    }
}

fn rw10_fields(lba: u64, blocks: u32) -> Result<(u32, u16), WireError> {
    let lba = u32::try_from(lba).map_err(|_| WireError::FieldRange {
        field: "logical block address",
        value: lba,
    })?;
    let len = u16::try_from(blocks).map_err(|_| WireError::FieldRange {
        field: "transfer length",
        value: blocks as u64,
    })?;
    Ok((lba, len))
}

fn rw10_bytes(op: u8, lba: u32, transfer_length: u16, control: u8) -> Vec<u8> {
    let mut v = Vec::with_capacity(10);
    v.push(op);
    v.push(0);
    v.extend_from_slice(&lba.to_be_bytes());
    v.push(0);
    v.extend_from_slice(&transfer_length.to_be_bytes());
    v.push(control);
    v
}

/// Standard INQUIRY data (first 36 bytes).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InquiryResponse {
    pub peripheral_qualifier: u8,
    pub peripheral_device_type: u8,
    pub removable: bool,
    pub version: u8,
    pub response_data_format: u8,
    pub additional_length: u8,
    pub vendor: [u8; 8],
    pub product: [u8; 16],
    pub revision: [u8; 4],
}

impl InquiryResponse {
    pub fn to_bytes(&self) -> [u8; STANDARD_INQUIRY_LEN] {
        let mut b = [0u8; STANDARD_INQUIRY_LEN];
        b[0] = (self.peripheral_qualifier << 5) | (self.peripheral_device_type & 0x1f);
        b[1] = if self.removable { 0x80 } else { 0 };
        b[2] = self.version;
        b[3] = self.response_data_format & 0x0f;
        b[4] = self.additional_length;
        b[8..16].copy_from_slice(&self.vendor);
        b[16..32].copy_from_slice(&self.product);
        b[32..36].copy_from_slice(&self.revision);
        b
    }

    /// Parses at least the first five bytes; identification strings are
    /// taken when present.
    pub fn parse(raw: &[u8]) -> Result<Self, WireError> {
        if raw.len() < 5 {
            return Err(WireError::Length {
                expected: 5,
                actual: raw.len(),
            });
        }
        let mut padded = [b' '; STANDARD_INQUIRY_LEN];
        let n = raw.len().min(STANDARD_INQUIRY_LEN);
        padded[..n].copy_from_slice(&raw[..n]);
        Ok(InquiryResponse {
            peripheral_qualifier: raw[0] >> 5,
            peripheral_device_type: raw[0] & 0x1f,
            removable: raw[1] & 0x80 != 0,
            version: raw[2],
            response_data_format: raw[3] & 0x0f,
            additional_length: raw[4],
            vendor: padded[8..16].try_into().unwrap(),
            product: padded[16..32].try_into().unwrap(),
            revision: padded[32..36].try_into().unwrap(),
        })
    }
}

/// READ CAPACITY(10) response.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CapacityResponse {
    pub last_lba: u32,
    pub block_length: u32,
}

impl CapacityResponse {
    pub fn block_count(&self) -> u64 {
        self.last_lba as u64 + 1
    }

    pub fn to_bytes(&self) -> [u8; 8] {
        let mut b = [0u8; 8];
        b[0..4].copy_from_slice(&self.last_lba.to_be_bytes());
        b[4..8].copy_from_slice(&self.block_length.to_be_bytes());
        b
    }

    pub fn parse(raw: &[u8]) -> Result<Self, WireError> {
        expect_len(raw, 8)?;
        Ok(CapacityResponse {
            last_lba: u32::from_be_bytes(raw[0..4].try_into().unwrap()),
            block_length: u32::from_be_bytes(raw[4..8].try_into().unwrap()),
        })
    }
}

/// Fixed-format sense data.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct SenseData {
    pub valid: bool,
    pub response_code: u8,
    pub filemark: bool,
    pub eom: bool,
    pub ili: bool,
    pub sense_key: u8,
    pub information: u32,
    pub additional_sense_length: u8,
    pub command_specific: u32,
    pub additional_sense_code: u8,
    pub additional_sense_code_qualifier: u8,
    pub field_replaceable_unit: u8,
    /// Bytes 15..18, kept opaque.
    pub sense_key_specific: [u8; 3],
}

impl SenseData {
    pub fn new(sense_key: u8, asc: u8, ascq: u8) -> Self {
        SenseData {
            response_code: SENSE_RESPONSE_CODE_CURRENT,
            sense_key,
            additional_sense_length: (FIXED_SENSE_LEN - 8) as u8,
            additional_sense_code: asc,
            additional_sense_code_qualifier: ascq,
            ..Default::default()
        }
    }

    pub fn no_sense() -> Self {
        Self::new(sense_key::NO_SENSE, 0, 0)
    }

    pub fn to_bytes(&self) -> [u8; FIXED_SENSE_LEN] {
        let mut b = [0u8; FIXED_SENSE_LEN];
        b[0] = (self.response_code & 0x7f) | if self.valid { 0x80 } else { 0 };
        b[2] = (self.sense_key & 0x0f)
            | if self.ili { 0x20 } else { 0 }
            | if self.eom { 0x40 } else { 0 }
            | if self.filemark { 0x80 } else { 0 };
        b[3..7].copy_from_slice(&self.information.to_be_bytes());
        b[7] = self.additional_sense_length;
        b[8..12].copy_from_slice(&self.command_specific.to_be_bytes());
        b[12] = self.additional_sense_code;
        b[13] = self.additional_sense_code_qualifier;
        b[14] = self.field_replaceable_unit;
        b[15..18].copy_from_slice(&self.sense_key_specific);
        b
    }

    pub fn parse(raw: &[u8]) -> Result<Self, WireError> {
        if raw.len() < FIXED_SENSE_LEN {
            return Err(WireError::Length {
                expected: FIXED_SENSE_LEN,
                actual: raw.len(),
            });
        }
        let code = raw[0] & 0x7f;
        if code != 0x70 && code != 0x71 {
            return Err(WireError::Malformed("fixed-format sense response code"));
        }
        Ok(SenseData {
            valid: raw[0] & 0x80 != 0,
            response_code: code,
            filemark: raw[2] & 0x80 != 0,
            eom: raw[2] & 0x40 != 0,
            ili: raw[2] & 0x20 != 0,
            sense_key: raw[2] & 0x0f,
            information: u32::from_be_bytes(raw[3..7].try_into().unwrap()),
            additional_sense_length: raw[7],
            command_specific: u32::from_be_bytes(raw[8..12].try_into().unwrap()),
            additional_sense_code: raw[12],
            additional_sense_code_qualifier: raw[13],
            field_replaceable_unit: raw[14],
            sense_key_specific: raw[15..18].try_into().unwrap(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn inquiry_cbw_layout() {
        let cmd = ScsiCommand::inquiry(36).to_bytes();
        let cbw = CommandBlockWrapper::new(1, 36, Direction::In, 0, &cmd).unwrap();
        let b = cbw.to_bytes().unwrap();
        assert_eq!(&b[0..4], &[0x55, 0x53, 0x42, 0x43]);
        assert_eq!(&b[4..8], &[1, 0, 0, 0]);
        assert_eq!(&b[8..12], &[0x24, 0, 0, 0]);
        assert_eq!(b[12], 0x80);
        assert_eq!(b[13], 0);
        assert_eq!(b[14], 6);
        assert_eq!(&b[15..21], &[0x12, 0, 0, 0, 0x24, 0]);
        assert!(b[21..].iter().all(|&x| x == 0));
    }

    #[test]
    fn test_unit_ready_cbw_has_no_flags() {
        let cmd = ScsiCommand::test_unit_ready().to_bytes();
        let b = CommandBlockWrapper::new(0, 0, Direction::In, 0, &cmd)
            .unwrap()
            .to_bytes()
            .unwrap();
        assert_eq!(b.len(), 31);
        assert_eq!(b[12], 0);
        assert_eq!(b[15], 0);
    }

    #[test]
    fn cbw_rejects_bad_command_length() {
        assert_eq!(
            CommandBlockWrapper::new(1, 0, Direction::None, 0, &[]),
            Err(WireError::CommandLength(0))
        );
        assert_eq!(
            CommandBlockWrapper::new(1, 0, Direction::None, 0, &[0; 17]),
            Err(WireError::CommandLength(17))
        );
        let mut cbw = CommandBlockWrapper::new(1, 0, Direction::None, 0, &[0; 6]).unwrap();
        cbw.cb_length = 20;
        assert!(cbw.to_bytes().is_err());
    }

    #[test]
    fn command_block_golden_bytes() {
        assert_eq!(
            ScsiCommand::read10(2048, 8).unwrap().to_bytes(),
            vec![0x28, 0, 0, 0, 0x08, 0, 0, 0, 0x08, 0]
        );
        assert_eq!(
            ScsiCommand::write10(0, 1).unwrap().to_bytes(),
            vec![0x2a, 0, 0, 0, 0, 0, 0, 0, 1, 0]
        );
        assert_eq!(
            ScsiCommand::request_sense(252).to_bytes(),
            vec![0x03, 0, 0, 0, 0xfc, 0]
        );
        assert_eq!(
            ScsiCommand::read_capacity().to_bytes(),
            vec![0x25, 0, 0, 0, 0, 0, 0, 0, 0, 0]
        );
    }

    #[test]
    fn rw10_range_checks() {
        assert!(matches!(
            ScsiCommand::read10(0, 65536),
            Err(WireError::FieldRange { .. })
        ));
        assert!(matches!(
            ScsiCommand::write10(1 << 32, 1),
            Err(WireError::FieldRange { .. })
        ));
    }

    #[test]
    fn csw_parsing() {
        let raw = [0x55, 0x53, 0x42, 0x53, 1, 0, 0, 0, 0, 0, 0, 0, 0];
        let csw = parse_csw(&raw, 1).unwrap();
        assert_eq!(csw.status, CswStatus::Passed);
        assert_eq!(csw.data_residue, 0);

        let mut failed = raw;
        failed[12] = 1;
        assert_eq!(parse_csw(&failed, 1).unwrap().status, CswStatus::Failed);

        assert!(matches!(
            parse_csw(&raw, 2),
            Err(WireError::TagMismatch {
                expected: 2,
                actual: 1
            })
        ));
        let mut bad = raw;
        bad[3] = 0x43;
        assert!(matches!(
            parse_csw(&bad, 1),
            Err(WireError::BadSignature(_))
        ));
        let mut status = raw;
        status[12] = 3;
        assert_eq!(parse_csw(&status, 1), Err(WireError::InvalidStatus(3)));
        assert!(matches!(
            parse_csw(&raw[..12], 1),
            Err(WireError::Length { .. })
        ));
    }

    #[test]
    fn command_parse_round_trip() {
        for cmd in [
            ScsiCommand::inquiry(36),
            ScsiCommand::test_unit_ready(),
            ScsiCommand::read_capacity(),
            ScsiCommand::read10(77, 3).unwrap(),
            ScsiCommand::write10(0xdead_beef, 0xffff).unwrap(),
            ScsiCommand::request_sense(18),
        ] {
            assert_eq!(ScsiCommand::parse(&cmd.to_bytes()).unwrap(), cmd);
        }
        assert_eq!(
            ScsiCommand::parse(&[0x1b, 0, 0, 0, 0, 0]),
            Err(WireError::UnknownOpcode(0x1b))
        );
    }

    #[test]
    fn sense_and_capacity_codecs() {
        let s = SenseData::new(sense_key::ILLEGAL_REQUEST, 0x21, 0);
        let b = s.to_bytes();
        assert_eq!(b[0], 0x70);
        assert_eq!(b[2], 0x05);
        assert_eq!(SenseData::parse(&b).unwrap(), s);
        assert!(SenseData::parse(&b[..17]).is_err());

        let c = CapacityResponse {
            last_lba: 16383,
            block_length: 512,
        };
        assert_eq!(c.to_bytes(), [0, 0, 0x3f, 0xff, 0, 0, 2, 0]);
        assert_eq!(c.block_count(), 16384);
    }

    /// Reads fields straight from the wire layout, independent of `parse`.
    fn reread(b: &[u8; 31]) -> (u32, u32, u32, u8, u8, u8, [u8; 16]) {
        let le = |i: usize| {
            b[i] as u32 | (b[i + 1] as u32) << 8 | (b[i + 2] as u32) << 16 | (b[i + 3] as u32) << 24
        };
        let mut cb = [0u8; 16];
        for (i, c) in cb.iter_mut().enumerate() {
            *c = b[15 + i];
        }
        (le(0), le(4), le(8), b[12], b[13], b[14], cb)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]
        #[test]
        fn cbw_round_trip(
            tag in any::<u32>(),
            len in any::<u32>(),
            dir_in in any::<bool>(),
            lun in 0u8..16,
            cmd in proptest::collection::vec(any::<u8>(), 1..=16),
        ) {
            let dir = if dir_in { Direction::In } else { Direction::Out };
            let cbw = CommandBlockWrapper::new(tag, len, dir, lun, &cmd).unwrap();
            let bytes = cbw.to_bytes().unwrap();
            prop_assert_eq!(CommandBlockWrapper::parse(&bytes).unwrap(), cbw);
            let (sig, t, l, flags, lun_b, cbl, cb) = reread(&bytes);
            prop_assert_eq!(sig, 0x4342_5355);
            prop_assert_eq!(t, tag);
            prop_assert_eq!(l, len);
            prop_assert_eq!(flags, if dir_in && len > 0 { 0x80 } else { 0 });
            prop_assert_eq!(lun_b, lun);
            prop_assert_eq!(cbl as usize, cmd.len());
            prop_assert_eq!(&cb[..cmd.len()], &cmd[..]);
            prop_assert!(cb[cmd.len()..].iter().all(|&x| x == 0));
        }
    }
}
