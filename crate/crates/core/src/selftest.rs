//! Loopback conformance scenarios: the host driver against the target
//! emulator over an in-memory pipe, plus a filesystem pass on top.

use std::fmt;
use std::time::{Duration, Instant};

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::blockdev::{BlockDevice, MemDevice};
use crate::fat32::{check_volume, format_volume, FatFs, NodeKind};
use crate::scsi::host::{init_device, DataPhase};
use crate::scsi::{
    opcode, sense_key, CswStatus, Fault, FaultAction, FaultTrigger, ScsiCommand, ScsiError,
    ScsiHost, SenseData, TargetEmulator, TargetEvent,
};
use crate::transport::{loopback_pair, ControlRequest, LoopbackPipe, ZeroOffsetPipe};

type Pipe = LoopbackPipe<MemDevice>;

#[derive(Debug, Clone)]
pub struct SelftestOptions {
    /// Bytes moved by the bulk round-trip scenario.
    pub round_trip_bytes: usize,
    pub seed: u64,
}

impl Default for SelftestOptions {
    fn default() -> Self {
        SelftestOptions {
            round_trip_bytes: 16 << 20,
            seed: 0x5eed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScenarioResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub elapsed: Duration,
}

#[derive(Debug, Clone, Default)]
pub struct SelftestReport {
    pub scenarios: Vec<ScenarioResult>,
}

impl SelftestReport {
    pub fn passed(&self) -> bool {
        self.scenarios.iter().all(|s| s.passed)
    }

    pub fn get(&self, name: &str) -> Option<&ScenarioResult> {
        self.scenarios.iter().find(|s| s.name == name)
    }
}

impl fmt::Display for SelftestReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for s in &self.scenarios {
            writeln!(
                f,
                "{} {:<22} {:>8.1} ms  {}",
                if s.passed { "PASS" } else { "FAIL" },
                s.name,
                s.elapsed.as_secs_f64() * 1e3,
                s.detail
            )?;
        }
        let failed = self.scenarios.iter().filter(|s| !s.passed).count();
        write!(f, "{} scenarios, {} failed", self.scenarios.len(), failed)
    }
}

type Outcome = Result<String, String>;

fn target(blocks: u64) -> TargetEmulator<MemDevice> {
    TargetEmulator::new(MemDevice::new(512, blocks).expect("block size is valid"))
}

fn host(blocks: u64) -> ScsiHost<Pipe> {
    let mut h = ScsiHost::new(loopback_pair(target(blocks)));
    h.set_ready_policy(20, Duration::ZERO);
    h
}

fn controls(events: &[TargetEvent]) -> Vec<ControlRequest> {
    events
        .iter()
        .filter_map(|e| match e {
            TargetEvent::Control(r) => Some(*r),
            _ => None,
        })
        .collect()
}

fn opcodes(events: &[TargetEvent]) -> Vec<u8> {
    events
        .iter()
        .filter_map(|e| match e {
            TargetEvent::CbwReceived { opcode, .. } => *opcode,
            _ => None,
        })
        .collect()
}

fn ensure(cond: bool, what: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(what())
    }
}

/// Tags of received CBWs and sent CSWs pair up and strictly increase; every
/// CSW passed with residue 0.
pub fn check_tag_discipline(events: &[TargetEvent]) -> Result<usize, String> {
    let mut last = 0u32;
    let mut open = None;
    let mut count = 0;
    for e in events {
        match *e {
            TargetEvent::CbwReceived { tag, .. } => {
                if open.is_some() {
                    return Err(format!("CBW {tag} before the previous CSW"));
                }
                if tag <= last {
                    return Err(format!("tag {tag} after {last}"));
                }
                last = tag;
                open = Some(tag);
            }
            TargetEvent::CswSent {
                tag,
                status,
                residue,
            } => {
                if open.take() != Some(tag) {
                    return Err(format!("CSW tag {tag} does not match its CBW"));
                }
                if status != 0 || residue != 0 {
                    return Err(format!("tag {tag}: status {status}, residue {residue}"));
                }
                count += 1;
            }
            _ => {}
        }
    }
    Ok(count)
}

fn init_sequence() -> Outcome {
    let dev = init_device(loopback_pair(target(4096))).map_err(|e| e.to_string())?;
    let ops = opcodes(dev.host().pipe().target().events());
    let want = [
        opcode::INQUIRY,
        opcode::TEST_UNIT_READY,
        opcode::READ_CAPACITY_10,
    ];
    ensure(ops == want, || format!("command order {ops:02x?}"))?;
    ensure(dev.block_count() == 4096 && dev.block_size() == 512, || {
        format!("geometry {}x{}", dev.block_count(), dev.block_size())
    })?;
    Ok(format!(
        "INQUIRY, TEST UNIT READY, READ CAPACITY; {} blocks of {}",
        dev.block_count(),
        dev.block_size()
    ))
}

/// Writes and reads back `bytes` of random data through the SCSI block
/// device, checking data, residues and tags.
pub fn bulk_round_trip(bytes: usize, seed: u64) -> Outcome {
    let blocks = (bytes as u64).div_ceil(512).max(1);
    let mut dev = init_device(loopback_pair(target(blocks))).map_err(|e| e.to_string())?;
    dev.host_mut().pipe_mut().target_mut().take_events();
    let mut data = vec![0u8; blocks as usize * 512];
    ChaCha8Rng::seed_from_u64(seed).fill_bytes(&mut data);
    const CHUNK: usize = 64 * 1024;
    for (i, part) in data.chunks(CHUNK).enumerate() {
        dev.write_blocks((i * CHUNK / 512) as u64, part)
            .map_err(|e| e.to_string())?;
    }
    let mut back = vec![0u8; data.len()];
    for (i, part) in back.chunks_mut(CHUNK).enumerate() {
        dev.read_blocks((i * CHUNK / 512) as u64, part)
            .map_err(|e| e.to_string())?;
    }
    ensure(back == data, || "read-back differs".into())?;
    let target = dev.host().pipe().target();
    ensure(target.backing().as_bytes() == &data[..], || {
        "backing store differs".into()
    })?;
    let n = check_tag_discipline(target.events())?;
    Ok(format!("{} bytes each way in {n} transactions", data.len()))
}

fn check_condition() -> Outcome {
    let mut h = host(256);
    let sense = SenseData::new(sense_key::MEDIUM_ERROR, 0x11, 0x00);
    h.pipe_mut().target_mut().configure_faults(vec![Fault::on(
        FaultTrigger::Opcode(opcode::READ_10),
        FaultAction::Fail(sense),
    )]);
    let mut buf = [0u8; 512];
    let err = h
        .transfer_command(&ScsiCommand::read10(3, 1).unwrap(), DataPhase::In(&mut buf))
        .unwrap_err();
    let got = match &err {
        ScsiError::CheckCondition {
            opcode: 0x28,
            sense,
        } => sense.sense_key,
        other => return Err(format!("expected check condition, got {other}")),
    };
    ensure(got == sense_key::MEDIUM_ERROR, || {
        format!("sense key {got:#x}")
    })?;
    let ops = opcodes(h.pipe().target().events());
    ensure(ops == [opcode::READ_10, opcode::REQUEST_SENSE], || {
        format!("commands {ops:02x?}")
    })?;
    h.test_unit_ready().map_err(|e| e.to_string())?;
    Ok(format!("status 1 -> REQUEST SENSE -> sense key {got:#x}"))
}

fn phase_error() -> Outcome {
    let mut h = host(256);
    h.pipe_mut().target_mut().configure_faults(vec![Fault::on(
        FaultTrigger::Opcode(opcode::READ_10),
        FaultAction::PhaseError,
    )]);
    let mut buf = [0u8; 512];
    let err = h
        .transfer_command(&ScsiCommand::read10(0, 1).unwrap(), DataPhase::In(&mut buf))
        .unwrap_err();
    ensure(matches!(err, ScsiError::PhaseError { .. }), || {
        format!("expected phase error, got {err}")
    })?;
    // A clear of the IN halt may precede the reset: the target sent no data.
    let all = controls(h.pipe().target().events());
    let reset = all
        .iter()
        .position(|r| *r == ControlRequest::BulkOnlyReset)
        .ok_or("no bulk-only reset was issued")?;
    let order = &all[reset..];
    let want = [
        ControlRequest::BulkOnlyReset,
        ControlRequest::ClearHaltIn,
        ControlRequest::ClearHaltOut,
    ];
    ensure(order == want, || format!("recovery order {order:?}"))?;
    let done = h
        .transfer_command(&ScsiCommand::read10(0, 1).unwrap(), DataPhase::In(&mut buf))
        .map_err(|e| e.to_string())?;
    ensure(done.csw.status == CswStatus::Passed, || {
        "retry failed".into()
    })?;
    Ok("status 2 -> reset, clear IN, clear OUT; retry passes".into())
}

fn stall_in() -> Outcome {
    let mut h = host(256);
    h.pipe_mut().target_mut().configure_faults(vec![Fault::on(
        FaultTrigger::Opcode(opcode::READ_10),
        FaultAction::StallIn,
    )]);
    let mut buf = [0u8; 1024];
    let outcome = h.transfer_command(&ScsiCommand::read10(0, 2).unwrap(), DataPhase::In(&mut buf));
    ensure(outcome.is_err(), || "stalled read reported success".into())?;
    h.test_unit_ready().map_err(|e| e.to_string())?;
    Ok(format!(
        "read stalled ({}); next command passes",
        outcome.unwrap_err()
    ))
}

fn stall_out() -> Outcome {
    let mut h = host(256);
    h.pipe_mut().target_mut().configure_faults(vec![Fault::on(
        FaultTrigger::Opcode(opcode::WRITE_10),
        FaultAction::StallOut,
    )]);
    let buf = [0x5au8; 512];
    let outcome = h.transfer_command(&ScsiCommand::write10(1, 1).unwrap(), DataPhase::Out(&buf));
    ensure(outcome.is_err(), || "stalled write reported success".into())?;
    h.transfer_command(&ScsiCommand::write10(1, 1).unwrap(), DataPhase::Out(&buf))
        .map_err(|e| e.to_string())?;
    Ok(format!(
        "write stalled ({}); retry passes",
        outcome.unwrap_err()
    ))
}

fn short_reads() -> Outcome {
    let mut h = host(256);
    h.pipe_mut().target_mut().configure_faults(vec![
        Fault::on(
            FaultTrigger::Command(1),
            FaultAction::ShortData {
                len: 512,
                honest_residue: true,
            },
        ),
        Fault::on(
            FaultTrigger::Command(2),
            FaultAction::ShortData {
                len: 512,
                honest_residue: false,
            },
        ),
    ]);
    let mut buf = [0u8; 1024];
    let done = h
        .transfer_command(&ScsiCommand::read10(0, 2).unwrap(), DataPhase::In(&mut buf))
        .map_err(|e| e.to_string())?;
    ensure(
        done.transferred == 512 && done.csw.data_residue == 512,
        || format!("honest short read gave {done:?}"),
    )?;
    let err = h
        .transfer_command(&ScsiCommand::read10(0, 2).unwrap(), DataPhase::In(&mut buf))
        .unwrap_err();
    ensure(matches!(err, ScsiError::Protocol(_)), || {
        format!("dishonest short read gave {err}")
    })?;
    h.test_unit_ready().map_err(|e| e.to_string())?;
    Ok("residue-reported prefix accepted; silent truncation rejected".into())
}

fn offset_equivalence(seed: u64) -> Outcome {
    fn run<P: crate::transport::BulkPipe>(pipe: P, data: &[u8]) -> Result<Vec<u8>, String> {
        let mut dev = init_device(pipe).map_err(|e| e.to_string())?;
        dev.write_blocks(5, data).map_err(|e| e.to_string())?;
        let mut back = vec![0u8; data.len()];
        dev.read_blocks(5, &mut back).map_err(|e| e.to_string())?;
        Ok(back)
    }
    let mut data = vec![0u8; 40 * 512];
    ChaCha8Rng::seed_from_u64(seed).fill_bytes(&mut data);

    let mut direct = loopback_pair(target(512));
    direct.start_capture();
    let mut copying = loopback_pair(target(512));
    copying.start_capture();
    let a = run(&mut direct, &data)?;
    let b = run(ZeroOffsetPipe::new(&mut copying), &data)?;
    ensure(a == data && b == data, || "data differs".into())?;
    let (wa, wb) = (direct.take_capture(), copying.take_capture());
    ensure(wa == wb, || "wire traffic differs".into())?;
    ensure(
        direct.target().backing().as_bytes() == copying.target().backing().as_bytes(),
        || "backing stores differ".into(),
    )?;
    Ok(format!("{} identical bulk transfers", wa.len()))
}

fn filesystem_over_scsi(seed: u64) -> Outcome {
    let err = |e: &dyn fmt::Display| e.to_string();
    let mut dev = init_device(loopback_pair(target(8 * 2048))).map_err(|e| err(&e))?;
    format_volume(&mut dev, "SELFTEST", 1).map_err(|e| err(&e))?;
    let mut fs = FatFs::mount(dev).map_err(|e| err(&e))?;
    let root = fs.root();
    let dir = fs
        .create_child(&root, "Some Directory", NodeKind::Directory)
        .map_err(|e| err(&e))?;
    let mut file = fs
        .create_child(&dir, "payload with a long name.bin", NodeKind::File)
        .map_err(|e| err(&e))?;
    let mut data = vec![0u8; 3 * 512 + 17];
    ChaCha8Rng::seed_from_u64(seed).fill_bytes(&mut data);
    fs.file_write(&mut file, 0, &data).map_err(|e| err(&e))?;
    let report = check_volume(&mut fs).map_err(|e| err(&e))?;
    ensure(report.is_clean(), || report.to_string())?;
    // Remount the backing store directly, bypassing the protocol.
    let backing = fs
        .into_device()
        .into_host()
        .into_pipe()
        .into_target()
        .into_backing();
    let mut direct = FatFs::mount(backing).map_err(|e| err(&e))?;
    let node = direct
        .lookup("/some directory/PAYLOAD WITH A LONG NAME.BIN")
        .map_err(|e| err(&e))?;
    let back = direct.read_all(&node).map_err(|e| err(&e))?;
    ensure(back == data, || "file content differs".into())?;
    Ok(format!(
        "{} bytes written over SCSI, read back directly",
        data.len()
    ))
}

type Scenario = (&'static str, Box<dyn Fn() -> Outcome>);

pub fn run_selftest(opts: &SelftestOptions) -> SelftestReport {
    let seed = opts.seed;
    let bytes = opts.round_trip_bytes;
    let scenarios: Vec<Scenario> = vec![
        ("init-sequence", Box::new(init_sequence)),
        (
            "bulk-round-trip",
            Box::new(move || bulk_round_trip(bytes, seed)),
        ),
        ("check-condition", Box::new(check_condition)),
        ("phase-error-recovery", Box::new(phase_error)),
        ("stall-in-recovery", Box::new(stall_in)),
        ("stall-out-recovery", Box::new(stall_out)),
        ("short-read-residue", Box::new(short_reads)),
        (
            "offset-equivalence",
            Box::new(move || offset_equivalence(seed)),
        ),
        (
            "filesystem-over-scsi",
            Box::new(move || filesystem_over_scsi(seed)),
        ),
    ];
    let mut report = SelftestReport::default();
    for (name, f) in scenarios {
        let start = Instant::now();
        let outcome = f();
        let elapsed = start.elapsed();
        let (passed, detail) = match outcome {
            Ok(d) => (true, d),
            Err(d) => (false, d),
        };
        report.scenarios.push(ScenarioResult {
            name,
            passed,
            detail,
            elapsed,
        });
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_scenarios_pass() {
        let report = run_selftest(&SelftestOptions {
            round_trip_bytes: 256 * 1024,
            seed: 1,
        });
        assert!(report.passed(), "{report}");
        assert_eq!(report.scenarios.len(), 9);
    }

    #[test]
    fn tag_discipline_rejects_reuse() {
        let events = [
            TargetEvent::CbwReceived {
                tag: 2,
                opcode: Some(0),
            },
            TargetEvent::CswSent {
                tag: 2,
                status: 0,
                residue: 0,
            },
            TargetEvent::CbwReceived {
                tag: 2,
                opcode: Some(0),
            },
        ];
        assert!(check_tag_discipline(&events).is_err());
        assert_eq!(check_tag_discipline(&events[..2]), Ok(1));
    }
}
