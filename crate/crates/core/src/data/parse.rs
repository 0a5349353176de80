use super::{DataError, Modality, RawSpectrum};

/// Parses a two-column `position<sep>intensity` text file.
///
/// The separator is a comma or any whitespace. Blank lines and lines starting
/// with `#` or `=` are skipped. Points are sorted by position; repeated
/// positions are averaged.
pub fn parse_spectrum_file(
    text: &str,
    modality: Modality,
    class_id: u32,
    source_id: &str,
) -> Result<RawSpectrum, DataError> {
    let mut points: Vec<(f64, f64)> = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') || line.starts_with('=') {
            continue;
        }
        let tokens: Vec<&str> = line
            .split(|c: char| c == ',' || c.is_whitespace())
            .filter(|t| !t.is_empty())
            .collect();
        if tokens.len() != 2 {
            return Err(DataError::MalformedFile {
                line: lineno,
                reason: format!("expected 2 columns, found {}", tokens.len()),
            });
        }
        let parse = |t: &str| {
            t.parse::<f64>().map_err(|_| DataError::MalformedFile {
                line: lineno,
                reason: format!("non-numeric token {t:?}"),
            })
        };
        let (x, y) = (parse(tokens[0])?, parse(tokens[1])?);
        if !x.is_finite() || !y.is_finite() {
            return Err(DataError::NonFiniteValue { line: lineno });
        }
        points.push((x, y));
    }

    points.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut positions = Vec::with_capacity(points.len());
    let mut intensities = Vec::with_capacity(points.len());
    let mut i = 0;
    while i < points.len() {
        let x = points[i].0;
        let mut j = i;
        let mut sum = 0.0;
        while j < points.len() && points[j].0 == x {
            sum += points[j].1;
            j += 1;
        }
        positions.push(x);
        intensities.push(sum / (j - i) as f64);
        i = j;
    }
    if positions.len() < 2 {
        return Err(DataError::MalformedFile {
            line: text.lines().count(),
            reason: format!("need at least 2 distinct points, found {}", positions.len()),
        });
    }
    RawSpectrum::new(positions, intensities, modality, class_id, source_id)
}
