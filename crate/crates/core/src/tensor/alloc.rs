// Activation buffers are a few hundred KB each and are freed and reallocated
// on every pass. With glibc's default thresholds each one is a fresh mmap, so
// every pass pays page faults on all of its memory. Keeping them on the heap
// roughly halves the cost of the cheap elementwise ops.

#[cfg(all(target_os = "linux", target_env = "gnu"))]
pub(crate) fn keep_buffers_mapped() {
    static ONCE: std::sync::Once = std::sync::Once::new();
    ONCE.call_once(|| {
        // SAFETY: mallopt only adjusts allocator tunables; it is safe to call
        // at any time.
        unsafe {
            libc::mallopt(libc::M_MMAP_THRESHOLD, 16 << 20);
            libc::mallopt(libc::M_TRIM_THRESHOLD, 128 << 20);
        }
    });
}

#[cfg(not(all(target_os = "linux", target_env = "gnu")))]
pub(crate) fn keep_buffers_mapped() {}
