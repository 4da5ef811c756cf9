/** Canonical wire encodings shared with the scheduler side.
 *
 * Floats render as shortest round-trip decimals with two normalizations
 * (integer-valued doubles get ".0"; exponents are unpadded), and scientific
 * notation kicks in below 1e-4 to match the scheduler's formatter.  JSON
 * serializes with sorted keys and no whitespace.
 */

export function canonicalFloat(x: number): string {
  if (!Number.isFinite(x)) throw new Error("non-finite value has no canonical form");
  if (Math.abs(x) >= 1e15) throw new Error("canonicalFloat only covers |x| < 1e15");
  if (Number.isInteger(x)) {
    return Object.is(x, -0) ? "-0.0" : `${x}.0`;
  }
  if (x !== 0 && Math.abs(x) < 1e-4) {
    // toExponential() with no argument keeps exactly the digits needed;
    // JS already prints exponents without zero padding ("1e-5")
    return x.toExponential().replace("e+", "e");
  }
  return String(x);
}

type Json = null | boolean | number | string | Json[] | { [k: string]: Json };

export function canonicalStringify(value: Json): string {
  if (value === null || typeof value !== "object") {
    return JSON.stringify(value);
  }
  if (Array.isArray(value)) {
    return "[" + value.map(canonicalStringify).join(",") + "]";
  }
  const keys = Object.keys(value).sort();
  const parts = keys.map((k) => JSON.stringify(k) + ":" + canonicalStringify(value[k]));
  return "{" + parts.join(",") + "}";
}
