//! Small shared helpers: checksums, fingerprints, seed derivation and a
//! bounded parallel map used by the I/O-heavy loaders.

/// CRC-32 (IEEE 802.3, reflected polynomial 0xEDB88320), the checksum used by
/// the weights and cache file formats.
pub fn crc32(bytes: &[u8]) -> u32 {
    crc32_update(0xFFFF_FFFF, bytes) ^ 0xFFFF_FFFF
}

/// Incremental CRC-32 over a running state (start from `0xFFFF_FFFF`,
/// finish by xoring with `0xFFFF_FFFF`).
pub fn crc32_update(state: u32, bytes: &[u8]) -> u32 {
    let table = crc32_table();
    let mut crc = state;
    for &b in bytes {
        let idx = ((crc ^ b as u32) & 0xFF) as usize;
        crc = (crc >> 8) ^ table[idx];
    }
    crc
}

fn crc32_table() -> &'static [u32; 256] {
    use std::sync::OnceLock;
    static TABLE: OnceLock<[u32; 256]> = OnceLock::new();
    TABLE.get_or_init(|| {
        let mut table = [0u32; 256];
        for (i, entry) in table.iter_mut().enumerate() {
            let mut c = i as u32;
            for _ in 0..8 {
                c = if c & 1 != 0 { 0xEDB8_8320 ^ (c >> 1) } else { c >> 1 };
            }
            *entry = c;
        }
        table
    })
}

/// FNV-1a 64-bit hash; stable across builds, used for structural fingerprints.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

/// Derive a sub-seed from a master seed and a purpose tag, so that every
/// random stream in a run flows from one `--seed` without collisions.
pub fn derive_seed(master: u64, tag: &str) -> u64 {
    let mut bytes = Vec::with_capacity(8 + tag.len());
    bytes.extend_from_slice(&master.to_le_bytes());
    bytes.extend_from_slice(tag.as_bytes());
    fnv1a64(&bytes)
}

/// Map `f` over `items`, preserving input order in the output, using at most
/// `threads` worker threads. With `threads <= 1` this runs inline, which is
/// the reproducibility default.
pub fn parallel_map<T, R, F>(items: &[T], threads: usize, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync,
{
    if threads <= 1 || items.len() < 2 {
        return items.iter().map(&f).collect();
    }
    let workers = threads.min(items.len());
    let next = std::sync::atomic::AtomicUsize::new(0);
    let mut slots: Vec<Option<R>> = (0..items.len()).map(|_| None).collect();
    let slots_ptr = SendPtr(slots.as_mut_ptr());
    std::thread::scope(|scope| {
        for _ in 0..workers {
            let next = &next;
            let f = &f;
            let slots_ptr = &slots_ptr;
            scope.spawn(move || loop {
                let i = next.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                if i >= items.len() {
                    break;
                }
                let out = f(&items[i]);
                // Each index is claimed exactly once, so writes never alias.
                unsafe { *slots_ptr.0.add(i) = Some(out) };
            });
        }
    });
    slots.into_iter().map(|s| s.expect("worker filled slot")).collect()
}

struct SendPtr<R>(*mut Option<R>);
unsafe impl<R: Send> Send for SendPtr<R> {}
unsafe impl<R: Send> Sync for SendPtr<R> {}
