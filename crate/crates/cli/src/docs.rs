//! JSON documents: intrinsics, distance constraints, incidence fields.
//!
//! Field names are fixed, order does not matter and unknown fields are
//! rejected.

use serde::{Deserialize, Serialize};
use serde_json::Value;

use depthcal::{DepthMap, DistanceConstraint, IncidenceField, Intrinsics};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IntrinsicsDocument {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl IntrinsicsDocument {
    pub fn to_intrinsics(&self) -> depthcal::Result<Intrinsics> {
        Intrinsics::new(self.fx, self.fy, self.cx, self.cy, self.width, self.height)
    }
}

impl From<&Intrinsics> for IntrinsicsDocument {
    fn from(k: &Intrinsics) -> Self {
        Self {
            fx: k.fx(),
            fy: k.fy(),
            cx: k.cx(),
            cy: k.cy(),
            width: k.width(),
            height: k.height(),
        }
    }
}

pub fn parse_intrinsics(text: &str) -> Result<Intrinsics, String> {
    let doc: IntrinsicsDocument = serde_json::from_str(text).map_err(|e| format!("intrinsics document: {e}"))?;
    doc.to_intrinsics().map_err(|e| format!("intrinsics document: {e}"))
}

/// One distance constraint. `d1`/`d2` may be left out when a depth map is
/// supplied to fill them in.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConstraintRecord {
    pub u1: f64,
    pub v1: f64,
    pub u2: f64,
    pub v2: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub d1: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub d2: Option<f64>,
    #[serde(rename = "L")]
    pub length: f64,
}

impl From<&DistanceConstraint> for ConstraintRecord {
    fn from(c: &DistanceConstraint) -> Self {
        let ([u1, v1], [u2, v2]) = (c.p1(), c.p2());
        Self {
            u1,
            v1,
            u2,
            v2,
            d1: Some(c.d1()),
            d2: Some(c.d2()),
            length: c.length(),
        }
    }
}

/// Depth at an integer pixel of `depth`, if valid.
fn depth_at(depth: &DepthMap, u: f64, v: f64) -> Result<f64, String> {
    if u < 0.0 || v < 0.0 || u.fract() != 0.0 || v.fract() != 0.0 {
        return Err(format!("pixel ({u}, {v}) is not an integer pixel of the depth map"));
    }
    depth
        .get(u as usize, v as usize)
        .ok_or_else(|| format!("pixel ({u}, {v}) has no valid depth in the depth map"))
}

/// Parses a JSON array of constraint records. Missing depths are read from
/// `depth`; an error names the offending record by index.
pub fn parse_constraints(text: &str, depth: Option<&DepthMap>) -> Result<Vec<DistanceConstraint>, String> {
    let items: Vec<Value> = serde_json::from_str(text).map_err(|e| format!("constraints document: {e}"))?;
    items
        .into_iter()
        .enumerate()
        .map(|(i, item)| {
            let at = |e: String| format!("constraint record {i}: {e}");
            let r: ConstraintRecord = serde_json::from_value(item).map_err(|e| at(e.to_string()))?;
            let fill = |d: Option<f64>, u: f64, v: f64| -> Result<f64, String> {
                match (d, depth) {
                    (Some(d), _) => Ok(d),
                    (None, Some(map)) => depth_at(map, u, v),
                    (None, None) => Err("depth missing and no depth map to read it from".into()),
                }
            };
            let d1 = fill(r.d1, r.u1, r.v1).map_err(at)?;
            let d2 = fill(r.d2, r.u2, r.v2).map_err(at)?;
            DistanceConstraint::new([r.u1, r.v1], [r.u2, r.v2], d1, d2, r.length).map_err(|e| at(e.to_string()))
        })
        .collect()
}

pub fn constraints_to_json(cs: &[DistanceConstraint]) -> String {
    let records: Vec<ConstraintRecord> = cs.iter().map(ConstraintRecord::from).collect();
    serde_json::to_string_pretty(&records).expect("constraint records serialize")
}

/// Incidence field in z=1 form, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FieldDocument {
    pub width: usize,
    pub height: usize,
    pub rays: Vec<[f64; 3]>,
}

impl From<&IncidenceField> for FieldDocument {
    fn from(f: &IncidenceField) -> Self {
        Self {
            width: f.width(),
            height: f.height(),
            rays: f.rays().to_vec(),
        }
    }
}

pub fn parse_field(text: &str) -> Result<IncidenceField, String> {
    let doc: FieldDocument = serde_json::from_str(text).map_err(|e| format!("field document: {e}"))?;
    IncidenceField::from_scaled_rays(doc.width, doc.height, doc.rays).map_err(|e| format!("field document: {e}"))
}

pub fn to_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("document serializes");
    s.push('\n');
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn intrinsics_any_order_and_unknown_rejected() {
        let k =
            parse_intrinsics(r#"{"height": 480, "width": 640, "cy": 240, "cx": 320, "fy": 500, "fx": 500}"#).unwrap();
        assert_eq!(k, Intrinsics::new(500.0, 500.0, 320.0, 240.0, 640, 480).unwrap());
        let e = parse_intrinsics(r#"{"fx": 1, "fy": 1, "cx": 0, "cy": 0, "width": 4, "height": 4, "skew": 0}"#)
            .unwrap_err();
        assert!(e.contains("skew"), "{e}");
        assert!(parse_intrinsics(r#"{"fx": -1, "fy": 1, "cx": 0, "cy": 0, "width": 4, "height": 4}"#).is_err());
    }

    #[test]
    fn constraints_round_trip() {
        let c = DistanceConstraint::new([1.0, 2.0], [3.0, 4.0], 2.0, 3.0, 1.5).unwrap();
        let text = constraints_to_json(&[c, c]);
        assert_eq!(parse_constraints(&text, None).unwrap(), vec![c, c]);
    }

    #[test]
    fn depths_filled_from_map() {
        let d = DepthMap::from_values(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let cs = parse_constraints(r#"[{"u1": 0, "v1": 0, "u2": 2, "v2": 1, "L": 7}]"#, Some(&d)).unwrap();
        assert_eq!((cs[0].d1(), cs[0].d2()), (1.0, 6.0));
    }

    #[test]
    fn errors_name_the_record() {
        let text = r#"[{"u1": 0, "v1": 0, "u2": 1, "v2": 1, "d1": 1, "d2": 2, "L": 3},
                       {"u1": 0, "v1": 0, "u2": 1, "v2": 1, "d1": 1, "L": 3}]"#;
        let e = parse_constraints(text, None).unwrap_err();
        assert!(e.starts_with("constraint record 1"), "{e}");
        let e = parse_constraints(
            r#"[{"u1": 0, "v1": 0, "u2": 1, "v2": 1, "d1": 1, "d2": 1, "L": 1, "w": 2}]"#,
            None,
        )
        .unwrap_err();
        assert!(e.contains("record 0") && e.contains('w'), "{e}");
    }

    #[test]
    fn field_round_trip() {
        let k = Intrinsics::new(10.0, 12.0, 2.0, 1.5, 4, 3).unwrap();
        let f = depthcal::field_from_intrinsics(&k);
        assert_eq!(parse_field(&to_json(&FieldDocument::from(&f))).unwrap(), f);
    }
}
