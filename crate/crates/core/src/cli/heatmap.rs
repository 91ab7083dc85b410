//! Square attention-map export as binary PGM or CSV.

use crate::numerics::Tensor;

use super::CliError;

/// Which vector of a map file to render.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MapSelect {
    /// Row `i` of an `L×N` layer-patch map.
    Layer(usize),
    /// A length-`N` patch map.
    Patch,
}

impl std::str::FromStr for MapSelect {
    type Err = CliError;

    fn from_str(s: &str) -> Result<Self, CliError> {
        if s == "patch" {
            return Ok(MapSelect::Patch);
        }
        s.parse()
            .map(MapSelect::Layer)
            .map_err(|_| CliError::Shape(format!("expected a layer index or 'patch', got '{s}'")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeatmapFormat {
    Pgm,
    Csv,
}

impl std::str::FromStr for HeatmapFormat {
    type Err = CliError;

    fn from_str(s: &str) -> Result<Self, CliError> {
        match s {
            "pgm" => Ok(HeatmapFormat::Pgm),
            "csv" => Ok(HeatmapFormat::Csv),
            other => Err(CliError::Config(format!(
                "unknown heatmap format '{other}'"
            ))),
        }
    }
}

/// The selected `N` values and the grid side `√N`.
pub fn select_map(map: &Tensor, select: MapSelect) -> Result<(Vec<f64>, usize), CliError> {
    let values = match select {
        MapSelect::Layer(i) => {
            if map.rank() != 2 {
                return Err(CliError::Shape(format!(
                    "layer selection needs an L×N map, got shape {:?}",
                    map.shape()
                )));
            }
            let layers = map.shape()[0];
            if i >= layers {
                return Err(CliError::Shape(format!(
                    "layer index {i} out of range for {layers} layers"
                )));
            }
            map.row(i).to_vec()
        }
        MapSelect::Patch => {
            if map.rank() != 1 {
                return Err(CliError::Shape(format!(
                    "patch selection needs a length-N map, got shape {:?}",
                    map.shape()
                )));
            }
            map.data().to_vec()
        }
    };
    let n = values.len();
    let side = (n as f64).sqrt().round() as usize;
    if side * side != n {
        return Err(CliError::Shape(format!("N = {n} is not a perfect square")));
    }
    Ok((values, side))
}

/// Min-max scaling to `0..=255`; a constant map becomes all 128.
pub fn to_gray(values: &[f64]) -> Vec<u8> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi <= lo {
        return vec![128; values.len()];
    }
    values
        .iter()
        .map(|v| ((v - lo) / (hi - lo) * 255.0).round() as u8)
        .collect()
}

pub fn render_pgm(values: &[f64], side: usize) -> Vec<u8> {
    let mut out = format!("P5\n{side} {side}\n255\n").into_bytes();
    out.extend(to_gray(values));
    out
}

/// One line per grid row; values at single precision, shortest round-trip
/// form.
pub fn render_csv(values: &[f64], side: usize) -> String {
    let mut out = String::new();
    for row in values.chunks(side) {
        let cells: Vec<String> = row.iter().map(|&v| format!("{}", v as f32)).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn min_max_example() {
        assert_eq!(to_gray(&[0.0, 1.0, 2.0, 3.0]), vec![0, 85, 170, 255]);
    }

    #[test]
    fn constant_map_is_mid_gray() {
        assert_eq!(to_gray(&[0.4; 9]), vec![128; 9]);
    }

    #[test]
    fn pgm_layout() {
        let b = render_pgm(&[0.0, 1.0, 2.0, 3.0], 2);
        assert_eq!(&b[..11], b"P5\n2 2\n255\n");
        assert_eq!(&b[11..], &[0, 85, 170, 255]);
    }

    #[test]
    fn csv_round_trips_single_precision() {
        let vals = [0.1, -1.0 / 3.0, 2.5e-8, 7.0];
        let csv = render_csv(&vals, 2);
        assert_eq!(csv.lines().count(), 2);
        let back: Vec<f32> = csv
            .split([',', '\n'])
            .filter(|s| !s.is_empty())
            .map(|s| s.parse().unwrap())
            .collect();
        let want: Vec<f32> = vals.iter().map(|&v| v as f32).collect();
        assert_eq!(back, want);
    }

    #[test]
    fn selection_rules() {
        let m = Tensor::new(&[2, 4], (0..8).map(f64::from).collect()).unwrap();
        assert_eq!(
            select_map(&m, MapSelect::Layer(1)).unwrap(),
            (vec![4.0, 5.0, 6.0, 7.0], 2)
        );
        assert!(select_map(&m, MapSelect::Layer(2)).is_err());
        assert!(select_map(&m, MapSelect::Patch).is_err());
        let v = Tensor::vector(vec![1.0; 6]).unwrap();
        assert!(select_map(&v, MapSelect::Patch).is_err());
        assert_eq!("patch".parse::<MapSelect>().unwrap(), MapSelect::Patch);
        assert_eq!("3".parse::<MapSelect>().unwrap(), MapSelect::Layer(3));
    }
}
