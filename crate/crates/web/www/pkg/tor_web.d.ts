/* tslint:disable */
/* eslint-disable */

/**
 * Samples `group` rollouts for one synthetic question from a briefly
 * warmed-up policy, then scores, selects and weights their tokens.
 */
export function selectTokens(seed: bigint, group: number, alpha_r: number, alpha_p: number, gamma_r: number, gamma_p: number): string;

/**
 * `points` samples of `min(r A, clip(r) A)` for `r` in `[0, rMax]`.
 */
export function surrogateCurve(advantage: number, eps_low: number, eps_high: number, r_max: number, points: number): string;

/**
 * Top-p entropy of a weight vector (normalized first).
 */
export function topPEntropy(weights: Float64Array, p: number): string;

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly selectTokens: (a: bigint, b: number, c: number, d: number, e: number, f: number) => [number, number, number, number];
    readonly surrogateCurve: (a: number, b: number, c: number, d: number, e: number) => [number, number, number, number];
    readonly topPEntropy: (a: number, b: number, c: number) => [number, number, number, number];
    readonly __wbindgen_externrefs: WebAssembly.Table;
    readonly __externref_table_dealloc: (a: number) => void;
    readonly __wbindgen_free: (a: number, b: number, c: number) => void;
    readonly __wbindgen_malloc: (a: number, b: number) => number;
    readonly __wbindgen_start: () => void;
}

export type SyncInitInput = BufferSource | WebAssembly.Module;

/**
 * Instantiates the given `module`, which can either be bytes or
 * a precompiled `WebAssembly.Module`.
 *
 * @param {{ module: SyncInitInput }} module - Passing `SyncInitInput` directly is deprecated.
 *
 * @returns {InitOutput}
 */
export function initSync(module: { module: SyncInitInput } | SyncInitInput): InitOutput;

/**
 * If `module_or_path` is {RequestInfo} or {URL}, makes a request and
 * for everything else, calls `WebAssembly.instantiate` directly.
 *
 * @param {{ module_or_path: InitInput | Promise<InitInput> }} module_or_path - Passing `InitInput` directly is deprecated.
 *
 * @returns {Promise<InitOutput>}
 */
export default function __wbg_init (module_or_path?: { module_or_path: InitInput | Promise<InitInput> } | InitInput | Promise<InitInput>): Promise<InitOutput>;
