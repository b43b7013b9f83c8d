//! Resident-set high-water mark of this process.

/// Where `peak_bytes` comes from; named in the bench CSV.
pub const SOURCE: &str = "VmHWM from /proc/self/status";

/// Peak resident bytes so far, if the platform reports it.
pub fn peak_bytes() -> Option<u64> {
    let status = std::fs::read_to_string("/proc/self/status").ok()?;
    parse_vmhwm(&status)
}

fn parse_vmhwm(status: &str) -> Option<u64> {
    let line = status.lines().find(|l| l.starts_with("VmHWM:"))?;
    let kb: u64 = line.split_whitespace().nth(1)?.parse().ok()?;
    Some(kb * 1024)
}
