//! Linux errno values used by traced socket syscalls.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

/// A positive errno code (the kernel returns its negation).
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Errno(pub i32);

const NAMES: &[(&str, i32)] = &[
    ("EINTR", 4),
    ("EBADF", 9),
    ("EAGAIN", 11),
    ("EINVAL", 22),
    ("EPIPE", 32),
    ("EADDRINUSE", 98),
    ("ENETUNREACH", 101),
    ("ECONNABORTED", 103),
    ("ECONNRESET", 104),
    ("ENOTCONN", 107),
    ("ETIMEDOUT", 110),
    ("ECONNREFUSED", 111),
    ("EHOSTUNREACH", 113),
    ("EINPROGRESS", 115),
];

impl Errno {
    pub const EINTR: Errno = Errno(4);
    pub const EBADF: Errno = Errno(9);
    pub const EAGAIN: Errno = Errno(11);
    pub const EINVAL: Errno = Errno(22);
    pub const EPIPE: Errno = Errno(32);
    pub const EADDRINUSE: Errno = Errno(98);
    pub const ECONNRESET: Errno = Errno(104);
    pub const ENOTCONN: Errno = Errno(107);
    pub const ETIMEDOUT: Errno = Errno(110);
    pub const ECONNREFUSED: Errno = Errno(111);
    pub const EINPROGRESS: Errno = Errno(115);

    pub fn name(self) -> Option<&'static str> {
        NAMES.iter().find(|(_, c)| *c == self.0).map(|(n, _)| *n)
    }
}

impl fmt::Display for Errno {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.name() {
            Some(n) => f.write_str(n),
            None => write!(f, "E{}", self.0),
        }
    }
}

#[derive(Debug, thiserror::Error)]
#[error("unknown errno `{0}`")]
pub struct UnknownErrno(pub String);

impl FromStr for Errno {
    type Err = UnknownErrno;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if let Some((_, c)) = NAMES.iter().find(|(n, _)| n.eq_ignore_ascii_case(s)) {
            return Ok(Errno(*c));
        }
        // Numeric fallback, with or without the leading `E`.
        let digits = s.strip_prefix('E').unwrap_or(s);
        digits
            .parse::<i32>()
            .ok()
            .filter(|c| *c > 0)
            .map(Errno)
            .ok_or_else(|| UnknownErrno(s.to_owned()))
    }
}

impl Serialize for Errno {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Errno {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_round_trip() {
        for (name, code) in NAMES {
            let e: Errno = name.parse().unwrap();
            assert_eq!(e.0, *code);
            assert_eq!(e.to_string(), *name);
        }
    }

    #[test]
    fn numeric_fallback() {
        assert_eq!("E200".parse::<Errno>().unwrap(), Errno(200));
        assert_eq!(Errno(200).to_string(), "E200");
        assert_eq!("111".parse::<Errno>().unwrap(), Errno::ECONNREFUSED);
        assert!("ENOPE".parse::<Errno>().is_err());
        assert!("0".parse::<Errno>().is_err());
    }
}
