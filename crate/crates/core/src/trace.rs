//! Trace format: one operation per line, `#` comments and blank lines
//! skipped. Addresses parse in hex (0x...) or decimal; the canonical
//! rendering uses hex addresses and decimal sizes/values.

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TraceOp {
    MemCopy {
        src: u64,
        dst: u64,
        size: u64,
    },
    MemInit {
        dst: u64,
        size: u64,
        val: u8,
    },
    MemAnd {
        src1: u64,
        src2: u64,
        dst: u64,
        size: u64,
    },
    MemOr {
        src1: u64,
        src2: u64,
        dst: u64,
        size: u64,
    },
    Read {
        addr: u64,
    },
    /// Writes the full cacheline containing `addr` with the 8-byte pattern
    /// repeated.
    Write {
        addr: u64,
        value: u64,
    },
}

fn parse_num(token: &str, line: usize) -> Result<u64> {
    let parsed = if let Some(hex) = token
        .strip_prefix("0x")
        .or_else(|| token.strip_prefix("0X"))
    {
        u64::from_str_radix(hex, 16)
    } else {
        token.parse()
    };
    parsed.map_err(|_| Error::Parse {
        line,
        reason: format!("bad number {token:?}"),
    })
}

pub fn parse_trace(text: &str) -> Result<Vec<TraceOp>> {
    Ok(parse_trace_with_lines(text)?
        .into_iter()
        .map(|(_, op)| op)
        .collect())
}

/// Like [`parse_trace`], but keeps each operation's 1-based source line so
/// execution errors can point back at the trace file.
pub fn parse_trace_with_lines(text: &str) -> Result<Vec<(usize, TraceOp)>> {
    let mut ops = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let body = raw.split('#').next().unwrap_or("");
        let tokens: Vec<&str> = body.split_whitespace().collect();
        if tokens.is_empty() {
            continue;
        }
        let args = &tokens[1..];
        let expect = |n: usize| -> Result<()> {
            if args.len() != n {
                return Err(Error::Parse {
                    line: line_no,
                    reason: format!("{} expects {n} operands, got {}", tokens[0], args.len()),
                });
            }
            Ok(())
        };
        let op = match tokens[0] {
            "MEMCOPY" => {
                expect(3)?;
                TraceOp::MemCopy {
                    src: parse_num(args[0], line_no)?,
                    dst: parse_num(args[1], line_no)?,
                    size: parse_num(args[2], line_no)?,
                }
            }
            "MEMINIT" => {
                expect(3)?;
                let val = parse_num(args[2], line_no)?;
                if val > u8::MAX as u64 {
                    return Err(Error::Parse {
                        line: line_no,
                        reason: format!("fill value {val} exceeds a byte"),
                    });
                }
                TraceOp::MemInit {
                    dst: parse_num(args[0], line_no)?,
                    size: parse_num(args[1], line_no)?,
                    val: val as u8,
                }
            }
            "MEMAND" | "MEMOR" => {
                expect(4)?;
                let (src1, src2, dst, size) = (
                    parse_num(args[0], line_no)?,
                    parse_num(args[1], line_no)?,
                    parse_num(args[2], line_no)?,
                    parse_num(args[3], line_no)?,
                );
                if tokens[0] == "MEMAND" {
                    TraceOp::MemAnd {
                        src1,
                        src2,
                        dst,
                        size,
                    }
                } else {
                    TraceOp::MemOr {
                        src1,
                        src2,
                        dst,
                        size,
                    }
                }
            }
            "READ" => {
                expect(1)?;
                TraceOp::Read {
                    addr: parse_num(args[0], line_no)?,
                }
            }
            "WRITE" => {
                expect(2)?;
                TraceOp::Write {
                    addr: parse_num(args[0], line_no)?,
                    value: parse_num(args[1], line_no)?,
                }
            }
            other => {
                return Err(Error::Parse {
                    line: line_no,
                    reason: format!("unsupported op {other:?}"),
                })
            }
        };
        ops.push((line_no, op));
    }
    Ok(ops)
}

pub fn format_op(op: &TraceOp) -> String {
    match *op {
        TraceOp::MemCopy { src, dst, size } => format!("MEMCOPY {src:#x} {dst:#x} {size}"),
        TraceOp::MemInit { dst, size, val } => format!("MEMINIT {dst:#x} {size} {val}"),
        TraceOp::MemAnd {
            src1,
            src2,
            dst,
            size,
        } => format!("MEMAND {src1:#x} {src2:#x} {dst:#x} {size}"),
        TraceOp::MemOr {
            src1,
            src2,
            dst,
            size,
        } => format!("MEMOR {src1:#x} {src2:#x} {dst:#x} {size}"),
        TraceOp::Read { addr } => format!("READ {addr:#x}"),
        TraceOp::Write { addr, value } => format!("WRITE {addr:#x} {value:#x}"),
    }
}

pub fn format_trace(ops: &[TraceOp]) -> String {
    let mut out = String::new();
    for op in ops {
        out.push_str(&format_op(op));
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_the_basic_forms() {
        let ops = parse_trace(
            "# header comment\n\
             MEMCOPY 0x1000 0x3000 4096\n\
             MEMINIT 0x2000 4096 0\n\
             MEMAND 0x0 0x1000 0x2000 64\n\
             MEMOR 0 4096 8192 64\n\
             READ 0x40\n\
             WRITE 64 0xdeadbeef\n",
        )
        .unwrap();
        assert_eq!(ops.len(), 6);
        assert_eq!(
            ops[0],
            TraceOp::MemCopy {
                src: 0x1000,
                dst: 0x3000,
                size: 4096
            }
        );
        assert_eq!(
            ops[5],
            TraceOp::Write {
                addr: 64,
                value: 0xdeadbeef
            }
        );
    }

    #[test]
    fn rejects_unknown_op_with_line_number() {
        let err = parse_trace("MEMCOPY 0 0x1000 64\nMEMXOR 0 1 2 64\n").unwrap_err();
        match err {
            Error::Parse { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn rejects_bad_arity_and_values() {
        assert!(parse_trace("READ\n").is_err());
        assert!(parse_trace("MEMINIT 0 64 256\n").is_err());
        assert!(parse_trace("WRITE 0 zz\n").is_err());
    }

    #[test]
    fn format_parse_round_trip_is_canonical() {
        let text = "MEMCOPY 0x1000 0x3000 4096\nWRITE 0x40 0xff\nREAD 0x0\n";
        let ops = parse_trace(text).unwrap();
        let canon = format_trace(&ops);
        assert_eq!(parse_trace(&canon).unwrap(), ops);
        assert_eq!(format_trace(&parse_trace(&canon).unwrap()), canon);
    }
}
