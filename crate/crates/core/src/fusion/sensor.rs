use std::io::BufRead;

use super::SmokeReading;

/// Largest value of a 10-bit ADC.
pub const ADC_MAX: u16 = 1023;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SensorIssue {
    /// 1-based line number.
    pub line: usize,
    pub text: String,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SensorParse {
    pub readings: Vec<SmokeReading>,
    pub issues: Vec<SensorIssue>,
}

/// Parses one `timestamp_ms,adc_value` line.
pub fn parse_sensor_line(line: &str) -> Result<SmokeReading, String> {
    let (ts, adc) = line
        .split_once(',')
        .ok_or_else(|| "expected timestamp_ms,adc_value".to_string())?;
    let timestamp_ms = ts
        .trim()
        .parse::<u64>()
        .map_err(|_| format!("bad timestamp {:?}", ts.trim()))?;
    let adc = adc
        .trim()
        .parse::<u32>()
        .map_err(|_| format!("bad ADC value {:?}", adc.trim()))?;
    if adc > ADC_MAX as u32 {
        return Err(format!("ADC value {adc} out of 10-bit range 0-{ADC_MAX}"));
    }
    Ok(SmokeReading {
        timestamp_ms,
        adc_value: adc as u16,
    })
}

/// Parses sensor lines, skipping blanks and `#` comments. Malformed lines are
/// reported and skipped.
pub fn parse_sensor_stream<I, S>(lines: I) -> SensorParse
where
    I: IntoIterator<Item = S>,
    S: AsRef<str>,
{
    let mut out = SensorParse::default();
    for (i, line) in lines.into_iter().enumerate() {
        let text = line.as_ref().trim();
        if text.is_empty() || text.starts_with('#') {
            continue;
        }
        match parse_sensor_line(text) {
            Ok(r) => out.readings.push(r),
            Err(reason) => {
                log::warn!("sensor line {}: {reason}", i + 1);
                out.issues.push(SensorIssue {
                    line: i + 1,
                    text: text.to_string(),
                    reason,
                });
            }
        }
    }
    out
}

pub fn read_sensor_stream<R: BufRead>(reader: R) -> std::io::Result<SensorParse> {
    let lines = reader.lines().collect::<Result<Vec<_>, _>>()?;
    Ok(parse_sensor_stream(lines))
}
