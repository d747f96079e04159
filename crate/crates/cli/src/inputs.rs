//! Parsing of model files and comma-separated flags.

use std::fs;
use std::path::Path;

use gibbs_mple::{Error, ModelSpec, ParameterBox, Result, Theta, Window};
use serde::Deserialize;
use serde_json::Value;

/// A model file: the [`ModelSpec`] fields plus optional `theta` and `box`.
///
/// ```json
/// {"family":"lennard_jones","D":0.5,"theta":[-1,0.5,0.2],
///  "box":{"lower":[-6,0.05,0.05],"upper":[4,5,0.45]}}
/// ```
#[derive(Debug, Clone)]
pub struct ModelFile {
    pub spec: ModelSpec,
    pub theta: Option<Theta>,
    pub parameter_box: Option<ParameterBox>,
}

fn field<T: for<'de> Deserialize<'de>>(path: &Path, name: &str, v: Value) -> Result<T> {
    serde_json::from_value(v)
        .map_err(|e| Error::InvalidArgument(format!("{}: field `{name}`: {e}", path.display())))
}

pub fn read_model(path: &Path) -> Result<ModelFile> {
    let text = fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    let mut value: Value = serde_json::from_str(&text)
        .map_err(|e| Error::InvalidArgument(format!("{}: {e}", path.display())))?;
    let obj = value
        .as_object_mut()
        .ok_or_else(|| Error::InvalidArgument(format!("{}: expected a JSON object", path.display())))?;
    let theta = obj.remove("theta").map(|v| field::<Theta>(path, "theta", v)).transpose()?;
    let parameter_box = obj
        .remove("box")
        .map(|v| field::<ParameterBox>(path, "box", v))
        .transpose()?;
    let spec: ModelSpec = field(path, "family", value)?;
    spec.validate()?;
    if let Some(t) = &theta {
        spec.check_theta(t)?;
    }
    if let Some(b) = &parameter_box {
        b.validate_for(&spec)?;
    }
    Ok(ModelFile {
        spec,
        theta,
        parameter_box,
    })
}

/// Box used when the model file has none.
pub fn default_box(spec: &ModelSpec) -> ParameterBox {
    let (lo, hi) = match spec {
        ModelSpec::Poisson => (vec![-10.0], vec![10.0]),
        ModelSpec::Strauss { .. } => (vec![-10.0, -10.0], vec![10.0, 10.0]),
        ModelSpec::LennardJones { .. } => {
            let range = spec.interaction_range();
            (vec![-10.0, 1e-3, 1e-3], vec![10.0, 10.0, range.min(5.0)])
        }
    };
    ParameterBox::new(Theta::new(lo).unwrap(), Theta::new(hi).unwrap()).expect("static box")
}

pub fn parse_numbers(s: &str) -> Result<Vec<f64>> {
    s.split(',')
        .map(|t| {
            t.trim()
                .parse::<f64>()
                .map_err(|_| Error::InvalidArgument(format!("cannot parse `{t}` as a number in `{s}`")))
        })
        .collect()
}

/// `x_min,x_max,y_min,y_max`
pub fn parse_window(s: &str) -> Result<Window> {
    let v = parse_numbers(s)?;
    if v.len() != 4 {
        return Err(Error::InvalidArgument(format!(
            "window needs four numbers x_min,x_max,y_min,y_max, got `{s}`"
        )));
    }
    // a malformed flag is a usage error, not a geometry failure
    Window::new(v[0], v[1], v[2], v[3]).map_err(|e| Error::InvalidArgument(e.to_string()))
}

pub fn parse_theta(s: &str) -> Result<Theta> {
    Theta::new(parse_numbers(s)?)
}
