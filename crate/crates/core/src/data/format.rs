//! OGPC point-cloud files: little-endian "OGPC", u16 version, u32 point
//! count, u32 channel count (6), then `m x 6` f32 values (x, y, z, r, g, b).

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::geometry::PointCloud;

pub const CLOUD_MAGIC: &[u8; 4] = b"OGPC";
pub const CLOUD_VERSION: u16 = 1;
pub const CLOUD_CHANNELS: u32 = 6;
const HEADER_LEN: u64 = 14;

pub fn write_cloud_to<W: Write>(cloud: &PointCloud, mut w: W) -> Result<()> {
    w.write_all(CLOUD_MAGIC)?;
    w.write_all(&CLOUD_VERSION.to_le_bytes())?;
    w.write_all(&(cloud.len() as u32).to_le_bytes())?;
    w.write_all(&CLOUD_CHANNELS.to_le_bytes())?;
    for (p, c) in cloud.positions().iter().zip(cloud.colors()) {
        for v in p.iter().chain(c) {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_cloud(cloud: &PointCloud, path: &Path) -> Result<()> {
    write_cloud_to(cloud, BufWriter::new(File::create(path)?))
}

fn read_exact_at<R: Read>(r: &mut R, buf: &mut [u8], offset: u64, what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Format {
            offset,
            msg: format!("truncated {what}"),
        },
        _ => Error::Io(e),
    })
}

pub fn read_cloud_from<R: Read>(mut r: R) -> Result<PointCloud> {
    let mut head = [0u8; HEADER_LEN as usize];
    read_exact_at(&mut r, &mut head[..4], 0, "magic")?;
    if &head[..4] != CLOUD_MAGIC {
        return Err(Error::Format {
            offset: 0,
            msg: format!("bad magic {:?}", &head[..4]),
        });
    }
    read_exact_at(&mut r, &mut head[4..], 4, "header")?;
    let version = u16::from_le_bytes([head[4], head[5]]);
    if version != CLOUD_VERSION {
        return Err(Error::Format {
            offset: 4,
            msg: format!("unsupported version {version}"),
        });
    }
    let m = u32::from_le_bytes(head[6..10].try_into().unwrap()) as usize;
    let channels = u32::from_le_bytes(head[10..14].try_into().unwrap());
    if channels != CLOUD_CHANNELS {
        return Err(Error::Format {
            offset: 10,
            msg: format!("expected 6 channels, got {channels}"),
        });
    }
    if m == 0 {
        return Err(Error::Format {
            offset: 6,
            msg: "cloud has no points".into(),
        });
    }
    let mut body = vec![0u8; m * 24];
    let mut filled = 0;
    while filled < body.len() {
        match r.read(&mut body[filled..])? {
            0 => {
                return Err(Error::Format {
                    offset: HEADER_LEN + filled as u64,
                    msg: format!("truncated point data, expected {} bytes", m * 24),
                })
            }
            k => filled += k,
        }
    }
    let mut positions = Vec::with_capacity(m);
    let mut colors = Vec::with_capacity(m);
    for row in body.chunks_exact(24) {
        let f = |i: usize| f32::from_le_bytes(row[i * 4..i * 4 + 4].try_into().unwrap());
        positions.push([f(0), f(1), f(2)]);
        colors.push([f(3), f(4), f(5)]);
    }
    let mut extra = [0u8; 1];
    if r.read(&mut extra)? != 0 {
        return Err(Error::Format {
            offset: HEADER_LEN + body.len() as u64,
            msg: "trailing bytes after point data".into(),
        });
    }
    PointCloud::new(positions, colors)
}

pub fn read_cloud(path: &Path) -> Result<PointCloud> {
    read_cloud_from(BufReader::new(File::open(path)?))
}
