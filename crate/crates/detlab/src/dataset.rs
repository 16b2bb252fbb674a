//! Line-delimited structured text persistence for worlds and pseudo-label
//! datasets.
//!
//! Floats are written in Rust's shortest round-trip notation, so every file
//! reloads bit-exact. World files carry the generating config followed by
//! one record per image; pseudo files carry instance lines in the same
//! family of formats.
//!
//! World record layout:
//! ```text
//! detlab-world 1
//! cfg <field> <value>        (fixed field order)
//! image <index>
//! label <0/1 per class>
//! object <x> <y> <w> <h> <class>
//! part <object-index> <x> <y> <w> <h>
//! proposal <x> <y> <w> <h> <feature values...>
//! end
//! ```

use std::path::Path;

use crate::geometry::BBox;
use crate::labelgen::Instance;
use crate::synthworld::{GroundTruthScene, ImageRecord, ProposalSet, World, WorldConfig};
use crate::{Error, Result};

fn f(v: f64) -> String {
    format!("{v:?}")
}

pub fn write_world(world: &World) -> String {
    let cfg = &world.cfg;
    let mut out = String::from("detlab-world 1\n");
    out.push_str(&format!("cfg num_images {}\n", cfg.num_images));
    out.push_str(&format!("cfg classes {}\n", cfg.classes));
    out.push_str(&format!("cfg objects_min {}\n", cfg.objects_min));
    out.push_str(&format!("cfg objects_max {}\n", cfg.objects_max));
    out.push_str(&format!("cfg canvas_w {}\n", f(cfg.canvas_w)));
    out.push_str(&format!("cfg canvas_h {}\n", f(cfg.canvas_h)));
    out.push_str(&format!("cfg object_min_size {}\n", f(cfg.object_min_size)));
    out.push_str(&format!("cfg object_max_size {}\n", f(cfg.object_max_size)));
    out.push_str(&format!("cfg part_fraction {}\n", f(cfg.part_fraction)));
    let parts: Vec<String> = cfg.part_classes.iter().map(usize::to_string).collect();
    out.push_str(&format!("cfg part_classes {}\n", parts.join(",")));
    out.push_str(&format!("cfg proposals_per_image {}\n", cfg.proposals_per_image));
    out.push_str(&format!("cfg feature_dim {}\n", cfg.feature_dim));
    out.push_str(&format!("cfg mix_gt {}\n", f(cfg.mix_gt)));
    out.push_str(&format!("cfg mix_part {}\n", f(cfg.mix_part)));
    out.push_str(&format!("cfg mix_uniform {}\n", f(cfg.mix_uniform)));
    out.push_str(&format!("cfg gain_body {}\n", f(cfg.gain_body)));
    out.push_str(&format!("cfg gain_part {}\n", f(cfg.gain_part)));
    out.push_str(&format!("cfg feature_noise {}\n", f(cfg.feature_noise)));
    out.push_str(&format!("cfg seed {}\n", cfg.seed));

    for (idx, img) in world.images.iter().enumerate() {
        out.push_str(&format!("image {idx}\n"));
        let label: Vec<&str> = img
            .scene
            .image_label
            .iter()
            .map(|&l| if l { "1" } else { "0" })
            .collect();
        out.push_str(&format!("label {}\n", label.join(" ")));
        for (b, class) in &img.scene.objects {
            out.push_str(&format!(
                "object {} {} {} {} {class}\n",
                f(b.x), f(b.y), f(b.w), f(b.h)
            ));
        }
        for (j, part) in img.scene.parts.iter().enumerate() {
            if let Some(p) = part {
                out.push_str(&format!(
                    "part {j} {} {} {} {}\n",
                    f(p.x), f(p.y), f(p.w), f(p.h)
                ));
            }
        }
        for (b, feats) in img.proposals.boxes.iter().zip(&img.proposals.features) {
            let fs: Vec<String> = feats.iter().map(|&v| f(v)).collect();
            out.push_str(&format!(
                "proposal {} {} {} {} {}\n",
                f(b.x), f(b.y), f(b.w), f(b.h), fs.join(" ")
            ));
        }
        out.push_str("end\n");
    }
    out
}

struct LineParser<'a> {
    lines: std::iter::Enumerate<std::str::Lines<'a>>,
}

impl<'a> LineParser<'a> {
    fn new(text: &'a str) -> Self {
        Self { lines: text.lines().enumerate() }
    }

    fn next(&mut self) -> Option<(usize, &'a str)> {
        for (n, line) in self.lines.by_ref() {
            let trimmed = line.trim();
            if !trimmed.is_empty() {
                return Some((n + 1, trimmed));
            }
        }
        None
    }
}

fn perr(line: usize, msg: impl Into<String>) -> Error {
    Error::Parse { line, msg: msg.into() }
}

fn parse_num<T: std::str::FromStr>(line: usize, token: &str) -> Result<T> {
    token
        .parse()
        .map_err(|_| perr(line, format!("bad number `{token}`")))
}

fn parse_box(line: usize, tokens: &[&str]) -> Result<BBox> {
    if tokens.len() < 4 {
        return Err(perr(line, "expected 4 box coordinates"));
    }
    Ok(BBox::new(
        parse_num(line, tokens[0])?,
        parse_num(line, tokens[1])?,
        parse_num(line, tokens[2])?,
        parse_num(line, tokens[3])?,
    ))
}

pub fn read_world(text: &str) -> Result<World> {
    let mut parser = LineParser::new(text);
    let (ln, header) = parser.next().ok_or_else(|| perr(1, "empty world file"))?;
    if header != "detlab-world 1" {
        return Err(perr(ln, "bad world header"));
    }

    let mut cfg = WorldConfig::default();
    let mut images: Vec<ImageRecord> = Vec::new();
    let mut current: Option<(GroundTruthScene, ProposalSet)> = None;

    while let Some((ln, line)) = parser.next() {
        let tokens: Vec<&str> = line.split_whitespace().collect();
        match tokens[0] {
            "cfg" => {
                if tokens.len() < 2 {
                    return Err(perr(ln, "bad cfg line"));
                }
                let value = tokens.get(2).copied().unwrap_or("");
                match tokens[1] {
                    "num_images" => cfg.num_images = parse_num(ln, value)?,
                    "classes" => cfg.classes = parse_num(ln, value)?,
                    "objects_min" => cfg.objects_min = parse_num(ln, value)?,
                    "objects_max" => cfg.objects_max = parse_num(ln, value)?,
                    "canvas_w" => cfg.canvas_w = parse_num(ln, value)?,
                    "canvas_h" => cfg.canvas_h = parse_num(ln, value)?,
                    "object_min_size" => cfg.object_min_size = parse_num(ln, value)?,
                    "object_max_size" => cfg.object_max_size = parse_num(ln, value)?,
                    "part_fraction" => cfg.part_fraction = parse_num(ln, value)?,
                    "part_classes" => {
                        cfg.part_classes = if value.is_empty() {
                            Vec::new()
                        } else {
                            value
                                .split(',')
                                .map(|v| parse_num(ln, v))
                                .collect::<Result<Vec<usize>>>()?
                        };
                    }
                    "proposals_per_image" => cfg.proposals_per_image = parse_num(ln, value)?,
                    "feature_dim" => cfg.feature_dim = parse_num(ln, value)?,
                    "mix_gt" => cfg.mix_gt = parse_num(ln, value)?,
                    "mix_part" => cfg.mix_part = parse_num(ln, value)?,
                    "mix_uniform" => cfg.mix_uniform = parse_num(ln, value)?,
                    "gain_body" => cfg.gain_body = parse_num(ln, value)?,
                    "gain_part" => cfg.gain_part = parse_num(ln, value)?,
                    "feature_noise" => cfg.feature_noise = parse_num(ln, value)?,
                    "seed" => cfg.seed = parse_num(ln, value)?,
                    other => return Err(perr(ln, format!("unknown cfg field `{other}`"))),
                }
            }
            "image" => {
                if current.is_some() {
                    return Err(perr(ln, "image record without terminating `end`"));
                }
                current = Some((
                    GroundTruthScene {
                        objects: Vec::new(),
                        parts: Vec::new(),
                        image_label: Vec::new(),
                    },
                    ProposalSet { boxes: Vec::new(), features: Vec::new() },
                ));
            }
            "label" => {
                let (scene, _) = current
                    .as_mut()
                    .ok_or_else(|| perr(ln, "label outside image record"))?;
                scene.image_label = tokens[1..]
                    .iter()
                    .map(|&t| match t {
                        "1" => Ok(true),
                        "0" => Ok(false),
                        other => Err(perr(ln, format!("bad label bit `{other}`"))),
                    })
                    .collect::<Result<Vec<bool>>>()?;
            }
            "object" => {
                let (scene, _) = current
                    .as_mut()
                    .ok_or_else(|| perr(ln, "object outside image record"))?;
                if tokens.len() != 6 {
                    return Err(perr(ln, "object needs 4 coordinates and a class"));
                }
                let b = parse_box(ln, &tokens[1..5])?;
                scene.objects.push((b, parse_num(ln, tokens[5])?));
                scene.parts.push(None);
            }
            "part" => {
                let (scene, _) = current
                    .as_mut()
                    .ok_or_else(|| perr(ln, "part outside image record"))?;
                if tokens.len() != 6 {
                    return Err(perr(ln, "part needs an object index and 4 coordinates"));
                }
                let j: usize = parse_num(ln, tokens[1])?;
                if j >= scene.parts.len() {
                    return Err(perr(ln, format!("part references missing object {j}")));
                }
                scene.parts[j] = Some(parse_box(ln, &tokens[2..6])?);
            }
            "proposal" => {
                let (_, proposals) = current
                    .as_mut()
                    .ok_or_else(|| perr(ln, "proposal outside image record"))?;
                if tokens.len() < 5 {
                    return Err(perr(ln, "proposal needs 4 coordinates"));
                }
                proposals.boxes.push(parse_box(ln, &tokens[1..5])?);
                let feats = tokens[5..]
                    .iter()
                    .map(|&t| parse_num(ln, t))
                    .collect::<Result<Vec<f64>>>()?;
                proposals.features.push(feats);
            }
            "end" => {
                let (scene, proposals) = current
                    .take()
                    .ok_or_else(|| perr(ln, "`end` outside image record"))?;
                images.push(ImageRecord { scene, proposals });
            }
            other => return Err(perr(ln, format!("unknown record `{other}`"))),
        }
    }
    if current.is_some() {
        return Err(perr(0, "truncated world file: missing `end`"));
    }
    Ok(World { cfg, images })
}

pub fn write_pseudo(pseudo: &[Vec<Instance>]) -> String {
    let mut out = String::from("detlab-pseudo 1\n");
    for (idx, instances) in pseudo.iter().enumerate() {
        out.push_str(&format!("image {idx}\n"));
        for inst in instances {
            out.push_str(&format!(
                "instance {} {} {} {} {} {} {}\n",
                f(inst.bbox.x),
                f(inst.bbox.y),
                f(inst.bbox.w),
                f(inst.bbox.h),
                inst.class,
                u8::from(inst.lambda_cls),
                u8::from(inst.lambda_reg),
            ));
        }
        out.push_str("end\n");
    }
    out
}

pub fn read_pseudo(text: &str) -> Result<Vec<Vec<Instance>>> {
    let mut parser = LineParser::new(text);
    let (ln, header) = parser.next().ok_or_else(|| perr(1, "empty pseudo file"))?;
    if header != "detlab-pseudo 1" {
        return Err(perr(ln, "bad pseudo header"));
    }
    let mut out: Vec<Vec<Instance>> = Vec::new();
    let mut current: Option<Vec<Instance>> = None;
    while let Some((ln, line)) = parser.next() {
        let tokens: Vec<&str> = line.split_whitespace().collect();
        match tokens[0] {
            "image" => {
                if current.is_some() {
                    return Err(perr(ln, "image record without terminating `end`"));
                }
                current = Some(Vec::new());
            }
            "instance" => {
                let list = current
                    .as_mut()
                    .ok_or_else(|| perr(ln, "instance outside image record"))?;
                if tokens.len() != 8 {
                    return Err(perr(ln, "instance needs box, class and two tags"));
                }
                let b = parse_box(ln, &tokens[1..5])?;
                let class = parse_num(ln, tokens[5])?;
                let lc = tokens[6] == "1";
                let lr = tokens[7] == "1";
                list.push(Instance { bbox: b, class, lambda_cls: lc, lambda_reg: lr });
            }
            "end" => {
                let list = current
                    .take()
                    .ok_or_else(|| perr(ln, "`end` outside image record"))?;
                out.push(list);
            }
            other => return Err(perr(ln, format!("unknown record `{other}`"))),
        }
    }
    if current.is_some() {
        return Err(perr(0, "truncated pseudo file: missing `end`"));
    }
    Ok(out)
}

pub fn save_world(world: &World, path: &Path) -> Result<()> {
    std::fs::write(path, write_world(world))?;
    Ok(())
}

pub fn load_world(path: &Path) -> Result<World> {
    read_world(&std::fs::read_to_string(path)?)
}

pub fn save_pseudo(pseudo: &[Vec<Instance>], path: &Path) -> Result<()> {
    std::fs::write(path, write_pseudo(pseudo))?;
    Ok(())
}

pub fn load_pseudo(path: &Path) -> Result<Vec<Vec<Instance>>> {
    read_pseudo(&std::fs::read_to_string(path)?)
}
