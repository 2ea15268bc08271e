//! Small policy trees used across the test suites.

use std::fs;
use std::io;
use std::path::Path;

use selint_core::parser::{self, classify_source, ParseError, SourceKind, SourceSet};
use selint_core::model::Policy;

/// A policy source tree held in memory.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Fixture {
    /// Relative path and contents.
    pub files: Vec<(String, String)>,
}

impl Fixture {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn file(mut self, path: &str, contents: impl Into<String>) -> Self {
        self.files.push((path.to_string(), contents.into()));
        self
    }

    /// Appends to an existing file, or adds it.
    pub fn append(&mut self, path: &str, contents: &str) {
        match self.files.iter_mut().find(|(p, _)| p == path) {
            Some((_, text)) => text.push_str(contents),
            None => self.files.push((path.to_string(), contents.to_string())),
        }
    }

    pub fn without(mut self, path: &str) -> Self {
        self.files.retain(|(p, _)| p != path);
        self
    }

    pub fn contents(&self, path: &str) -> Option<&str> {
        self.files
            .iter()
            .find(|(p, _)| p == path)
            .map(|(_, c)| c.as_str())
    }

    /// Sources in the order a directory scan would produce them.
    pub fn sources(&self) -> SourceSet {
        let mut files = self.files.clone();
        files.sort();
        let mut set = SourceSet::new();
        for (path, text) in &files {
            let name = Path::new(path)
                .file_name()
                .and_then(|n| n.to_str())
                .unwrap_or(path);
            match classify_source(name) {
                Some(SourceKind::Macros) => set.push_macros(path, text.clone()),
                Some(SourceKind::Policy) => set.push_policy(path, text.clone()),
                None => {}
            }
        }
        set
    }

    pub fn parse(&self) -> Result<Policy, ParseError> {
        parser::parse_policy(&self.sources())
    }

    pub fn write_to(&self, dir: &Path) -> io::Result<()> {
        for (path, text) in &self.files {
            let full = dir.join(path);
            if let Some(parent) = full.parent() {
                fs::create_dir_all(parent)?;
            }
            fs::write(full, text)?;
        }
        Ok(())
    }
}

/// Permission-set macros of the simple-macro example.
pub const LOGD_MACROS: &str = "\
define(`r_file_perms', `{ getattr open read ioctl lock }')
define(`r_dir_perms', `{ open getattr read search ioctl }')
";

pub const LOGD_RULE: &str = "allow logd rootfs:dir { getattr create open read search ioctl };";

pub const LOGD_SUGGESTION: &str = "allow logd rootfs:dir { r_dir_perms create };";

/// `logd` listing directory permissions one by one.
pub fn logd_listing() -> Fixture {
    Fixture::new()
        .file("global_macros", LOGD_MACROS)
        .file("attributes", "attribute domain;\nattribute file_type;\n")
        .file(
            "logd.te",
            format!("type logd, domain;\ntype rootfs, file_type;\n\n{LOGD_RULE}\n"),
        )
}

/// `file_type_trans` and the permission macros it uses.
pub fn file_type_trans() -> Fixture {
    Fixture::new()
        .file(
            "global_macros",
            "\
define(`notdevfile_class_set', `{ file }')
define(`r_dir_perms', `{ open getattr read search ioctl }')
define(`ra_dir_perms', `{ r_dir_perms add_name write }')
define(`create_dir_perms', `{ create reparent rename rmdir setattr rw_dir_perms }')
define(`rw_dir_perms', `{ r_dir_perms add_name remove_name write }')
define(`create_file_perms', `{ create rename setattr unlink rw_file_perms }')
define(`rw_file_perms', `{ r_file_perms w_file_perms }')
define(`r_file_perms', `{ getattr open read ioctl lock }')
define(`w_file_perms', `{ open append write }')
",
        )
        .file(
            "te_macros",
            "\
# file_type_trans(domain, dir_type, file_type)
define(`file_type_trans', `
allow $1 $2:dir ra_dir_perms;
allow $1 $3:dir create_dir_perms;
allow $1 $3:notdevfile_class_set create_file_perms;
')
",
        )
        .file("attributes", "attribute domain;\nattribute file_type;\n")
        .file(
            "app.te",
            "type app, domain;\ntype app_dir, file_type;\ntype app_file, file_type;\n",
        )
}

pub const SOCKET_MACROS: &str = "\
# unix_socket_connect(clientdomain, socket, serverdomain)
define(`unix_socket_connect', `
allow $1 $2_socket:sock_file write;
allow $1 $3:unix_stream_socket connectto;
')
";

/// The two rules `unix_socket_connect(a, b, c)` expands to, written out.
pub fn socket_connect() -> Fixture {
    Fixture::new()
        .file("te_macros", SOCKET_MACROS)
        .file(
            "a.te",
            "\
type a;
type b_socket;
type c;

allow a b_socket:sock_file write;
allow a c:unix_stream_socket connectto;
",
        )
}

/// Line of the `getattr search` rule in the risk example.
pub const SEARCH_LINE: usize = 154;
/// Line of the `execute` rule in the risk example.
pub const EXECUTE_LINE: usize = 104;

pub const SEARCH_RULE: &str = "allow untrusted_app security_file:dir { getattr search };";
pub const EXECUTE_RULE: &str = "allow untrusted_app system_file:file execute;";

/// `domain.te` with the two scored rules at their original lines.
pub fn app_rules() -> Fixture {
    let mut lines = vec![String::new(); SEARCH_LINE];
    lines[0] = "# Rules for all domains.".into();
    lines[EXECUTE_LINE - 1] = EXECUTE_RULE.into();
    lines[SEARCH_LINE - 1] = SEARCH_RULE.into();
    let mut text = lines.join("\n");
    text.push('\n');
    Fixture::new()
        .file(
            "types.te",
            "type untrusted_app;\ntype security_file;\ntype system_file;\n",
        )
        .file("domain.te", text)
}

/// A type transition without the allow rules it needs.
pub fn transition_only() -> Fixture {
    Fixture::new()
        .file("types.te", "type a;\ntype b;\ntype c;\n")
        .file("a.te", "type_transition a b:file c;\n")
}

pub fn transition_complete() -> Fixture {
    Fixture::new()
        .file("types.te", "type a;\ntype b;\ntype c;\n")
        .file(
            "a.te",
            "\
type_transition a b:file c;
allow a b:dir { search write };
allow a c:file { create write };
",
        )
}

/// `read write` on a file made usable by `use` on the descriptor.
pub fn fd_use() -> Fixture {
    Fixture::new()
        .file("types.te", "type a;\ntype b;\n")
        .file("a.te", "allow a b:file { read write };\nallow a b:fd use;\n")
}

pub fn fd_missing() -> Fixture {
    Fixture::new()
        .file("types.te", "type a;\ntype b;\n")
        .file("a.te", "allow a b:file { read write };\n")
}

/// A small tree laid out like the platform policy: declaration files,
/// both macro files, attributes, guards and macro usages.
pub fn aosp_tree() -> Fixture {
    Fixture::new()
        .file(
            "security_classes",
            "\
class file
class dir
class fd
class sock_file
class unix_stream_socket
class process
class capability
class chr_file
",
        )
        .file(
            "access_vectors",
            "\
common file { ioctl read write create getattr setattr lock relabelfrom relabelto append map unlink link rename execute open execute_no_trans }
class file inherits file { entrypoint }
class dir inherits file { add_name remove_name reparent search rmdir }
class fd { use }
class sock_file inherits file
class unix_stream_socket { connectto read write getattr }
class process { fork transition sigchld sigkill signal ptrace getattr setexec setcurrent }
class capability { chown dac_override setuid setgid sys_chroot sys_admin net_admin }
class chr_file inherits file
",
        )
        .file(
            "attributes",
            "\
attribute domain;
attribute appdomain;
attribute file_type;
attribute exec_type;
attribute dev_type;
",
        )
        .file(
            "global_macros",
            "\
define(`notdevfile_class_set', `{ file sock_file }')
define(`r_file_perms', `{ getattr open read ioctl lock map }')
define(`w_file_perms', `{ open append write lock map }')
define(`rw_file_perms', `{ r_file_perms w_file_perms }')
define(`x_file_perms', `{ getattr execute execute_no_trans map }')
define(`rx_file_perms', `{ r_file_perms x_file_perms }')
define(`create_file_perms', `{ create rename setattr unlink rw_file_perms }')
define(`r_dir_perms', `{ open getattr read search ioctl lock }')
define(`w_dir_perms', `{ open search write add_name remove_name lock }')
define(`rw_dir_perms', `{ r_dir_perms w_dir_perms }')
define(`ra_dir_perms', `{ r_dir_perms add_name write }')
define(`create_dir_perms', `{ create reparent rename rmdir setattr rw_dir_perms }')
",
        )
        .file(
            "te_macros",
            "\
# domain_trans(olddomain, type, newdomain)
define(`domain_trans', `
allow $1 $2:file { getattr open read execute map };
allow $1 $3:process transition;
allow $3 $2:file { entrypoint open read execute getattr map };
')

# domain_auto_trans(olddomain, type, newdomain)
define(`domain_auto_trans', `
domain_trans($1,$2,$3)
type_transition $1 $2:process $3;
')

# file_type_trans(domain, dir_type, file_type)
define(`file_type_trans', `
allow $1 $2:dir ra_dir_perms;
allow $1 $3:dir create_dir_perms;
allow $1 $3:notdevfile_class_set create_file_perms;
')

# file_type_auto_trans(domain, dir_type, file_type)
define(`file_type_auto_trans', `
file_type_trans($1, $2, $3)
type_transition $1 $2:dir $3;
type_transition $1 $2:notdevfile_class_set $3;
')

# init_daemon_domain(domain)
define(`init_daemon_domain', `
domain_auto_trans(init, $1_exec, $1)
')

# unix_socket_connect(clientdomain, socket, serverdomain)
define(`unix_socket_connect', `
allow $1 $2_socket:sock_file write;
allow $1 $3:unix_stream_socket connectto;
')

define(`userdebug_or_eng', ifelse(target_build_variant, `eng', $1, ifelse(target_build_variant, `userdebug', $1)))
",
        )
        .file(
            "domain.te",
            "\
# Rules for all domains.
allow domain self:process { fork sigchld };
allow domain rootfs:dir r_dir_perms;
allow domain system_file:file { getattr open read ioctl lock map };
allow domain device:dir search;
neverallow domain security_file:file write;
",
        )
        .file(
            "file.te",
            "\
type rootfs, file_type;
type system_file, file_type;
type security_file, file_type;
type device, dev_type;
type tmpfs, file_type;
type logd_socket, file_type;
type vold_data_file, file_type;
type app_data_file, file_type;
type graphics_device, dev_type;
",
        )
        .file(
            "init.te",
            "\
type init, domain;
allow init self:capability { chown dac_override setuid setgid sys_admin };
allow init tmpfs:dir { create search write add_name };
allow init device:chr_file { read write };
",
        )
        .file(
            "logd.te",
            "\
type logd, domain;
type logd_exec, exec_type, file_type;
init_daemon_domain(logd)
allow logd rootfs:dir { getattr create open read search ioctl };
allow logd self:capability { setuid setgid };
",
        )
        .file(
            "vold.te",
            "\
type vold, domain;
type vold_exec, exec_type, file_type;
init_daemon_domain(vold)
allow vold self:capability sys_chroot;
allow vold vold_data_file:dir { create_dir_perms };
type_transition vold tmpfs:file vold_data_file;
allow vold graphics_device:chr_file { read write open ioctl };
userdebug_or_eng(`
  allow vold security_file:file { read open };
')
",
        )
        .file(
            "untrusted_app.te",
            "\
type untrusted_app, domain, appdomain;
type system_app, domain, appdomain;
allow appdomain app_data_file:file { read write };
allow untrusted_app security_file:dir { getattr search };
allow untrusted_app system_file:file execute;
allow untrusted_app logd_socket:sock_file write;
allow untrusted_app logd:unix_stream_socket connectto;
",
        )
}
