/* tslint:disable */
/* eslint-disable */

/**
 * Losses of a student whose true-class logit is swept over `[-8, 8]`
 * while the other logits stay fixed. Returns interleaved
 * `[x, pc, kd, x, pc, kd, ...]`.
 */
export function loss_curves(student: Float64Array, teacher: Float64Array, label: number, xi: number, alpha: number, t: number, points: number): Float64Array;

/**
 * Parse `score label` lines (comma, tab or space separated; `#` comments)
 * and return JSON `{"auroc": a, "points": [[fpr, tpr], ...], "n": n}`.
 */
export function roc_from_text(text: string): string;

/**
 * Softmax of `logits` at temperature `t`.
 */
export function softmax_at(logits: Float64Array, t: number): Float64Array;

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly loss_curves: (a: number, b: number, c: number, d: number, e: number, f: number, g: number, h: number, i: number) => [number, number, number, number];
    readonly roc_from_text: (a: number, b: number) => [number, number, number, number];
    readonly softmax_at: (a: number, b: number, c: number) => [number, number, number, number];
    readonly __wbindgen_externrefs: WebAssembly.Table;
    readonly __wbindgen_malloc: (a: number, b: number) => number;
    readonly __externref_table_dealloc: (a: number) => void;
    readonly __wbindgen_free: (a: number, b: number, c: number) => void;
    readonly __wbindgen_realloc: (a: number, b: number, c: number, d: number) => number;
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
