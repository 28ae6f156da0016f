//! Compiling small C programs for fixtures.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::sync::OnceLock;

pub fn cc_available() -> bool {
    static OK: OnceLock<bool> = OnceLock::new();
    *OK.get_or_init(|| {
        Command::new("cc")
            .arg("--version")
            .stdout(Stdio::null())
            .stderr(Stdio::null())
            .status()
            .map(|s| s.success())
            .unwrap_or(false)
    })
}

/// Compiles `source` to `out`. Returns false when the compiler is missing
/// or fails (stderr is printed then).
pub fn compile(source: &str, out: &Path, args: &[&str]) -> bool {
    if !cc_available() {
        return false;
    }
    let src = out.with_extension("c");
    if fs::write(&src, source).is_err() {
        return false;
    }
    let result = Command::new("cc").args(["-O1", "-o"]).arg(out).arg(&src).args(args).output();
    let _ = fs::remove_file(&src);
    match result {
        Ok(o) if o.status.success() => true,
        Ok(o) => {
            eprintln!("cc failed: {}", String::from_utf8_lossy(&o.stderr));
            false
        }
        Err(_) => false,
    }
}

/// Compiles into a per-process cache directory, once per name.
pub fn cached(name: &str, source: &str, args: &[&str]) -> Option<PathBuf> {
    let dir = std::env::temp_dir().join(format!("udocker-cprog-{}", std::process::id()));
    fs::create_dir_all(&dir).ok()?;
    let out = dir.join(name);
    if out.is_file() || compile(source, &out, args) {
        Some(out)
    } else {
        None
    }
}

/// Prints the uid, euid, gid and egid it sees.
pub const ID_PROBE: &str = r#"
#include <stdio.h>
#include <unistd.h>
int main(void) {
    printf("uid=%d euid=%d gid=%d egid=%d\n", (int)getuid(), (int)geteuid(), (int)getgid(), (int)getegid());
    return 0;
}
"#;

/// `cat` for one file; exits 1 when it cannot be opened.
pub const CAT: &str = r#"
#include <fcntl.h>
#include <stdio.h>
#include <unistd.h>
int main(int argc, char **argv) {
    if (argc < 2) return 2;
    int fd = open(argv[1], O_RDONLY);
    if (fd < 0) { perror(argv[1]); return 1; }
    char buf[4096];
    ssize_t n;
    while ((n = read(fd, buf, sizeof buf)) > 0) write(1, buf, n);
    close(fd);
    return 0;
}
"#;

/// Calls stat(2) on its argument `n` times.
pub const STAT_LOOP: &str = r#"
#include <stdlib.h>
#include <sys/stat.h>
int main(int argc, char **argv) {
    long n = argc > 2 ? atol(argv[2]) : 100000;
    struct stat st;
    int ok = 0;
    for (long i = 0; i < n; i++) ok += stat(argv[1], &st) == 0;
    return ok == n ? 0 : 1;
}
"#;

/// Arithmetic with no system calls in the loop.
pub const CPU_LOOP: &str = r#"
#include <stdio.h>
#include <stdlib.h>
int main(int argc, char **argv) {
    long n = argc > 1 ? atol(argv[1]) : 100000000;
    volatile unsigned long x = 1;
    for (long i = 0; i < n; i++) x = x * 6364136223846793005UL + 1442695040888963407UL;
    printf("%lu\n", x & 1);
    return 0;
}
"#;

/// Reads commands from stdin and performs one path system call each,
/// printing the result and the current directory as getcwd(2) reports it.
/// Opened descriptors stay open until `closeall`, so an outside observer
/// can inspect them after `sync`, which prints the pid and the number of
/// open descriptors.
///
/// Commands: `open P`, `openat D P`, `creat P`, `chdir P`, `mkdir P`,
/// `symlink T P`, `stat P`, `lstat P`, `readlink P`, `unlink P`, `rmdir P`,
/// `rename A B`, `sync`, `closeall`.
pub const PATH_FUZZ: &str = r#"
#define _GNU_SOURCE
#include <errno.h>
#include <fcntl.h>
#include <stdio.h>
#include <string.h>
#include <sys/stat.h>
#include <sys/syscall.h>
#include <unistd.h>
static int fds[4096];
static int nfds;
static void keep(int fd) { if (fd >= 0) { if (nfds < 4096) fds[nfds++] = fd; else close(fd); } }
int main(void) {
    char line[8192];
    setvbuf(stdout, NULL, _IOLBF, 0);
    while (fgets(line, sizeof line, stdin)) {
        line[strcspn(line, "\n")] = 0;
        char *cmd = strtok(line, " ");
        char *a = strtok(NULL, " ");
        char *b = strtok(NULL, " ");
        if (!cmd) continue;
        if (!strcmp(cmd, "sync")) { printf("sync pid=%d fds=%d\n", (int)getpid(), nfds); continue; }
        if (!strcmp(cmd, "closeall")) { while (nfds) close(fds[--nfds]); printf("closed\n"); continue; }
        int rc = 0;
        char buf[4096];
        struct stat st;
        errno = 0;
        if (!strcmp(cmd, "open") && a) { rc = open(a, O_RDONLY); keep(rc); }
        else if (!strcmp(cmd, "openat") && a && b) {
            int d = open(a, O_RDONLY | O_DIRECTORY);
            if (d < 0) rc = -1;
            else { rc = openat(d, b, O_RDONLY); int e = errno; keep(rc); close(d); errno = e; }
        }
        else if (!strcmp(cmd, "creat") && a) { rc = open(a, O_WRONLY | O_CREAT, 0644); keep(rc); }
        else if (!strcmp(cmd, "chdir") && a) rc = chdir(a);
        else if (!strcmp(cmd, "mkdir") && a) rc = mkdir(a, 0755);
        else if (!strcmp(cmd, "symlink") && a && b) rc = symlink(a, b);
        else if (!strcmp(cmd, "stat") && a) rc = stat(a, &st);
        else if (!strcmp(cmd, "lstat") && a) rc = lstat(a, &st);
        else if (!strcmp(cmd, "unlink") && a) rc = unlink(a);
        else if (!strcmp(cmd, "rmdir") && a) rc = rmdir(a);
        else if (!strcmp(cmd, "rename") && a && b) rc = rename(a, b);
        else if (!strcmp(cmd, "readlink") && a) {
            ssize_t n = readlink(a, buf, sizeof buf - 1);
            rc = n < 0 ? -1 : 0;
            if (n >= 0) buf[n] = 0;
        } else { printf("bad\n"); continue; }
        int err = rc < 0 ? errno : 0;
        char cwd[4096];
        if (syscall(SYS_getcwd, cwd, sizeof cwd) < 0) strcpy(cwd, "?");
        printf("%s rc=%d errno=%d cwd=%s", cmd, rc < 0 ? -1 : 0, err, cwd);
        if (!strcmp(cmd, "readlink") && rc == 0) printf(" link=%s", buf);
        printf("\n");
    }
    return 0;
}
"#;
